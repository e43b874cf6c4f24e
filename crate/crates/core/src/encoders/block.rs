//! Pre-norm residual transformer block shared by both branches.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

use super::{INIT_STD, LAYER_NORM_EPS};

/// Learnable state of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    pub fn init(dim: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        let hidden = mlp_ratio * dim;
        BlockParams {
            ln1_gain: Tensor::full(vec![dim], 1.0),
            ln1_bias: Tensor::zeros(vec![dim]),
            wq: Tensor::randn(vec![dim, dim], INIT_STD, rng),
            bq: Tensor::zeros(vec![dim]),
            wk: Tensor::randn(vec![dim, dim], INIT_STD, rng),
            bk: Tensor::zeros(vec![dim]),
            wv: Tensor::randn(vec![dim, dim], INIT_STD, rng),
            bv: Tensor::zeros(vec![dim]),
            wo: Tensor::randn(vec![dim, dim], INIT_STD, rng),
            bo: Tensor::zeros(vec![dim]),
            ln2_gain: Tensor::full(vec![dim], 1.0),
            ln2_bias: Tensor::zeros(vec![dim]),
            w1: Tensor::randn(vec![dim, hidden], INIT_STD, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![hidden, dim], INIT_STD, rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn register(&self, g: &mut Graph, prefix: &str) -> BlockNodes {
        BlockNodes {
            ln1_gain: g.param(&format!("{prefix}.ln1_gain"), &self.ln1_gain),
            ln1_bias: g.param(&format!("{prefix}.ln1_bias"), &self.ln1_bias),
            wq: g.param(&format!("{prefix}.wq"), &self.wq),
            bq: g.param(&format!("{prefix}.bq"), &self.bq),
            wk: g.param(&format!("{prefix}.wk"), &self.wk),
            bk: g.param(&format!("{prefix}.bk"), &self.bk),
            wv: g.param(&format!("{prefix}.wv"), &self.wv),
            bv: g.param(&format!("{prefix}.bv"), &self.bv),
            wo: g.param(&format!("{prefix}.wo"), &self.wo),
            bo: g.param(&format!("{prefix}.bo"), &self.bo),
            ln2_gain: g.param(&format!("{prefix}.ln2_gain"), &self.ln2_gain),
            ln2_bias: g.param(&format!("{prefix}.ln2_bias"), &self.ln2_bias),
            w1: g.param(&format!("{prefix}.w1"), &self.w1),
            b1: g.param(&format!("{prefix}.b1"), &self.b1),
            w2: g.param(&format!("{prefix}.w2"), &self.w2),
            b2: g.param(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.ln1_gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1_bias"), &self.ln1_bias));
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.bq"), &self.bq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.bk"), &self.bk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.bv"), &self.bv));
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.bo"), &self.bo));
        out.push((format!("{prefix}.ln2_gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2_bias"), &self.ln2_bias));
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.ln1_gain"), &mut self.ln1_gain));
        out.push((format!("{prefix}.ln1_bias"), &mut self.ln1_bias));
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.bq"), &mut self.bq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.bk"), &mut self.bk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.bv"), &mut self.bv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
        out.push((format!("{prefix}.bo"), &mut self.bo));
        out.push((format!("{prefix}.ln2_gain"), &mut self.ln2_gain));
        out.push((format!("{prefix}.ln2_bias"), &mut self.ln2_bias));
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }
}

/// Node ids for one registration of [`BlockParams`].
pub struct BlockNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// One pre-norm residual block:
/// `e' = MSA(LN(e)) + e`, then `e_out = MLP(LN(e')) + e'`.
///
/// Attention splits the model dim into `heads` slices, scales dot
/// products by 1/sqrt(head_dim), and, when `rel_bias` carries a
/// `(table, max_dist)` pair, adds that head's clipped relative-distance
/// bias to the logits before the softmax. Dropout is applied after the
/// attention projection and after the MLP output in training mode.
pub fn encoder_block(
    g: &mut Graph,
    e_prev: NodeId,
    nodes: &BlockNodes,
    heads: usize,
    rel_bias: Option<(NodeId, usize)>,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<NodeId> {
    let len = g.value(e_prev).rows();
    let dim = g.value(e_prev).cols();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let ln1 = g.layer_norm(e_prev, nodes.ln1_gain, nodes.ln1_bias, LAYER_NORM_EPS)?;
    let q = g.matmul(ln1, nodes.wq)?;
    let q = g.add_row(q, nodes.bq)?;
    let k = g.matmul(ln1, nodes.wk)?;
    let k = g.add_row(k, nodes.bk)?;
    let v = g.matmul(ln1, nodes.wv)?;
    let v = g.add_row(v, nodes.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let mut logits = g.scale(raw, scale);
        if let Some((table, max_dist)) = rel_bias {
            let bias = g.relative_bias(table, h, len, max_dist)?;
            logits = g.add(logits, bias)?;
        }
        let attn = g.softmax_rows(logits)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let proj = g.matmul(merged, nodes.wo)?;
    let proj = g.add_row(proj, nodes.bo)?;
    let proj = g.dropout(proj, dropout_rate, training, rng)?;
    let e_mid = g.add(proj, e_prev)?;

    let ln2 = g.layer_norm(e_mid, nodes.ln2_gain, nodes.ln2_bias, LAYER_NORM_EPS)?;
    let hidden = g.matmul(ln2, nodes.w1)?;
    let hidden = g.add_row(hidden, nodes.b1)?;
    let hidden = g.gelu(hidden);
    let out = g.matmul(hidden, nodes.w2)?;
    let out = g.add_row(out, nodes.b2)?;
    let out = g.dropout(out, dropout_rate, training, rng)?;
    g.add(out, e_mid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed_block(dim: usize, ratio: usize) -> BlockParams {
        let mut rng = Rng::new(0);
        let mut b = BlockParams::init(dim, ratio, &mut rng);
        for w in [
            &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2,
        ] {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        b
    }

    #[test]
    fn zero_weights_leave_input_unchanged() {
        let params = zeroed_block(8, 2);
        let mut rng = Rng::new(1);
        let input = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let e0 = g.constant(input.clone());
        let nodes = params.register(&mut g, "b");
        let out = encoder_block(&mut g, e0, &nodes, 2, None, 0.0, false, &mut rng).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn single_token_sequence_runs() {
        // with L = 1 each attention row is the softmax of one logit,
        // i.e. exactly [1], so the head output equals that token's value
        let mut rng = Rng::new(2);
        let params = BlockParams::init(4, 2, &mut rng);
        let input = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let e0 = g.constant(input);
        let nodes = params.register(&mut g, "b");
        let out = encoder_block(&mut g, e0, &nodes, 2, None, 0.0, false, &mut rng).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 4]);
        assert!(g.value(out).all_finite());
    }

    /// Hand-rolled reference forward of the same block, written without
    /// the graph so the two implementations can disagree.
    fn reference_block(x: &[Vec<f64>], p: &BlockParams, heads: usize) -> Vec<Vec<f64>> {
        let dim = x[0].len();
        let head_dim = dim / heads;
        let ln = |row: &[f64], gain: &Tensor, bias: &Tensor| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain.data()[j] + bias.data()[j])
                .collect()
        };
        let affine = |rows: &[Vec<f64>], w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let (wi, wo) = (w.rows(), w.cols());
            rows.iter()
                .map(|r| {
                    (0..wo)
                        .map(|j| {
                            b.data()[j]
                                + (0..wi).map(|t| r[t] * w.data()[t * wo + j]).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let gelu = |v: f64| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));

        let lnx: Vec<Vec<f64>> = x
            .iter()
            .map(|r| ln(r, &p.ln1_gain, &p.ln1_bias))
            .collect();
        let q = affine(&lnx, &p.wq, &p.bq);
        let k = affine(&lnx, &p.wk, &p.bk);
        let v = affine(&lnx, &p.wv, &p.bv);
        let l = x.len();
        let mut merged = vec![vec![0.0; dim]; l];
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            for i in 0..l {
                let mut logits: Vec<f64> = (0..l)
                    .map(|j| {
                        cols.clone()
                            .map(|c| q[i][c] * k[j][c])
                            .sum::<f64>()
                            / (head_dim as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in &mut logits {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for (jj, c) in cols.clone().enumerate() {
                    merged[i][c] = (0..l)
                        .map(|j| logits[j] / sum * v[j][h * head_dim + jj])
                        .sum();
                }
            }
        }
        let attn_out = affine(&merged, &p.wo, &p.bo);
        let e_mid: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn_out)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let ln2: Vec<Vec<f64>> = e_mid
            .iter()
            .map(|r| ln(r, &p.ln2_gain, &p.ln2_bias))
            .collect();
        let mut hidden = affine(&ln2, &p.w1, &p.b1);
        for row in &mut hidden {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mlp_out = affine(&hidden, &p.w2, &p.b2);
        e_mid
            .iter()
            .zip(&mlp_out)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = Rng::new(7);
        let params = BlockParams::init(4, 4, &mut rng);
        let rows = vec![
            vec![0.3, -0.7, 1.1, 0.2],
            vec![-0.5, 0.9, 0.1, -1.3],
        ];
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        let mut g = Graph::new();
        let e0 = g.constant(Tensor::from_vec(vec![2, 4], flat).unwrap());
        let nodes = params.register(&mut g, "b");
        let out = encoder_block(&mut g, e0, &nodes, 1, None, 0.0, false, &mut rng).unwrap();
        let expect = reference_block(&rows, &params, 1);
        let expect_flat: Vec<f64> = expect.iter().flatten().cloned().collect();
        for (a, b) in g.value(out).data().iter().zip(&expect_flat) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
