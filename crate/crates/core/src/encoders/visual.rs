//! Patch-based visual branch.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

use super::{encoder_block, VisualConfig, VisualNodes};

/// Cuts an H-by-W-by-C image into non-overlapping patches, row-major
/// over the patch grid; each output row is the row-major flattening of
/// one patch block.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: shape.to_vec(),
            right: vec![patch_size],
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: shape.to_vec(),
            right: vec![patch_size],
        });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let patch_dim = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                let row = gy * patch_size + py;
                let start = (row * w + gx * patch_size) * c;
                data.extend_from_slice(&image.data()[start..start + patch_size * c]);
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, patch_dim], data)
}

/// Inverse of [`patchify`]; reconstructs the image exactly.
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch_size: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch_size, w / patch_size);
    let patch_dim = patch_size * patch_size * c;
    if patches.shape() != [gh * gw, patch_dim] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            left: patches.shape().to_vec(),
            right: vec![gh * gw, patch_dim],
        });
    }
    let mut data = vec![0.0; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let row_base = (gy * gw + gx) * patch_dim;
            for py in 0..patch_size {
                let row = gy * patch_size + py;
                let dst = (row * w + gx * patch_size) * c;
                let src = row_base + py * patch_size * c;
                data[dst..dst + patch_size * c]
                    .copy_from_slice(&patches.data()[src..src + patch_size * c]);
            }
        }
    }
    Tensor::from_vec(vec![h, w, c], data)
}

/// `e0 = concat(class_token; patches . E) + E_position`, with the class
/// token at row 0.
pub fn embed_sequence(g: &mut Graph, patches: NodeId, nodes: &VisualNodes) -> Result<NodeId> {
    let projected = g.matmul(patches, nodes.patch_proj)?;
    let seq = g.concat_rows(&[nodes.class_token, projected])?;
    let pos = g.value(nodes.pos_embedding);
    if pos.shape() != g.value(seq).shape() {
        return Err(Error::ShapeMismatch {
            op: "embed_sequence",
            left: g.value(seq).shape().to_vec(),
            right: pos.shape().to_vec(),
        });
    }
    g.add(seq, nodes.pos_embedding)
}

/// Full visual forward: patchify, embed, run the encoder stack, take
/// the class-token state, project to the shared space, L2-normalize.
/// Returns a 1-by-proj_dim unit row.
pub fn encode_image(
    g: &mut Graph,
    image: &Tensor,
    cfg: &VisualConfig,
    nodes: &VisualNodes,
    training: bool,
    rng: &mut Rng,
) -> Result<NodeId> {
    let expect = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            left: image.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let patches = patchify(image, cfg.patch_size)?;
    let patches = g.constant(patches);
    let mut e = embed_sequence(g, patches, nodes)?;
    for block in &nodes.blocks {
        e = encoder_block(g, e, block, cfg.heads, None, cfg.dropout_rate, training, rng)?;
    }
    let class_state = g.take_row(e, 0)?;
    let projected = g.matmul(class_state, nodes.head_w)?;
    let projected = g.add_row(projected, nodes.head_b)?;
    g.l2_normalize_rows(projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::VisualParams;

    fn tiny_cfg() -> VisualConfig {
        VisualConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            model_dim: 8,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            proj_dim: 4,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn patchify_unit_patches_in_grid_order() {
        let img = Tensor::from_vec(vec![2, 2, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn patchify_matches_index_arithmetic_oracle() {
        // distinct values so every position is traceable
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Tensor::from_vec(vec![4, 4, 1], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // patch (0,0): rows 0-1, cols 0-1 -> 0,1,4,5
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // patch (0,1): 2,3,6,7
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // patch (1,0): 8,9,12,13
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
        // patch (1,1): 10,11,14,15
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_paper_shape() {
        let img = Tensor::zeros(vec![224, 224, 3]);
        let p = patchify(&img, 32).unwrap();
        assert_eq!(p.shape(), &[49, 3072]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::zeros(vec![5, 5, 1]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn patch_reassembly_is_exact() {
        let mut rng = Rng::new(5);
        for (h, w, c, p) in [(6, 6, 3, 2), (8, 4, 1, 4), (9, 9, 2, 3)] {
            let img = Tensor::randn(vec![h, w, c], 1.0, &mut rng);
            let patches = patchify(&img, p).unwrap();
            let back = unpatchify(&patches, h, w, c, p).unwrap();
            assert_eq!(back.data(), img.data());
        }
    }

    #[test]
    fn embed_sequence_additive_structure() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(3);
        let mut params = VisualParams::init(&cfg, &mut rng);
        for v in params.class_token.data_mut() {
            *v = 1.5;
        }

        // zero patches + zero positions: row 0 is the class token, rest zero
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let patches = g.constant(Tensor::zeros(vec![4, 4]));
        let e0 = embed_sequence(&mut g, patches, &nodes).unwrap();
        let out = g.value(e0);
        assert_eq!(out.shape(), &[5, 8]);
        assert_eq!(&out.data()[..8], &[1.5; 8]);
        assert_eq!(&out.data()[8..], &[0.0; 32]);

        // zero patches + nonzero positions: output equals positions except
        // row 0 which adds the class token
        let mut pos = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        std::mem::swap(&mut params.pos_embedding, &mut pos);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let patches = g.constant(Tensor::zeros(vec![4, 4]));
        let e0 = embed_sequence(&mut g, patches, &nodes).unwrap();
        let out = g.value(e0);
        for j in 0..8 {
            assert_eq!(out.data()[j], params.pos_embedding.data()[j] + 1.5);
        }
        assert_eq!(&out.data()[8..], &params.pos_embedding.data()[8..]);
    }

    #[test]
    fn embed_sequence_matches_direct_matrix_oracle() {
        // 2 patches of width 2 with an identity-like projection into dim 2
        let cfg = VisualConfig {
            image_size: 2,
            channels: 1,
            patch_size: 1,
            model_dim: 2,
            heads: 1,
            layers: 0,
            mlp_ratio: 1,
            proj_dim: 2,
            dropout_rate: 0.0,
        };
        let mut rng = Rng::new(1);
        let mut params = VisualParams::init(&cfg, &mut rng);
        params.patch_proj = Tensor::from_vec(vec![1, 2], vec![2.0, -1.0]).unwrap();
        params.pos_embedding = Tensor::from_vec(
            vec![5, 2],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let patches = g.constant(Tensor::from_vec(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e0 = embed_sequence(&mut g, patches, &nodes).unwrap();
        let out = g.value(e0);
        // row i>0: [p*2, p*-1] + pos
        assert_eq!(out.at2(1, 0), 1.0 * 2.0 + 0.3);
        assert_eq!(out.at2(1, 1), 1.0 * -1.0 + 0.4);
        assert_eq!(out.at2(4, 0), 4.0 * 2.0 + 0.9);
        assert_eq!(out.at2(4, 1), 4.0 * -1.0 + 1.0);
    }

    #[test]
    fn encode_image_outputs_unit_vector() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(9);
        let params = VisualParams::init(&cfg, &mut rng);
        let img = Tensor::randn(vec![4, 4, 1], 0.5, &mut rng);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let y = encode_image(&mut g, &img, &cfg, &nodes, false, &mut rng).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 4]);
        let norm: f64 = out.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn encode_image_is_deterministic_in_eval_mode() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(10);
        let params = VisualParams::init(&cfg, &mut rng);
        let img = Tensor::randn(vec![4, 4, 1], 0.5, &mut rng);
        let run = |rng: &mut Rng| {
            let mut g = Graph::new();
            let nodes = params.register(&mut g);
            let y = encode_image(&mut g, &img, &cfg, &nodes, false, rng).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(&mut rng);
        let b = run(&mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_image_rejects_wrong_size() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(11);
        let params = VisualParams::init(&cfg, &mut rng);
        let img = Tensor::zeros(vec![6, 6, 1]);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        assert!(encode_image(&mut g, &img, &cfg, &nodes, false, &mut rng).is_err());
    }
}
