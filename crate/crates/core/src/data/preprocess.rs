//! Image preprocessing: bilinear resize and standardization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resampling with half-pixel centers, clamped at the edges.
pub fn resize_bilinear(image: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "resize_bilinear",
            left: shape.to_vec(),
            right: vec![target_h, target_w],
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; target_h * target_w * c];
    let scale_y = h as f64 / target_h as f64;
    let scale_x = w as f64 / target_w as f64;
    for ty in 0..target_h {
        let sy = ((ty as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..target_w {
            let sx = ((tx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| image.data()[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ty * target_w + tx) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::from_vec(vec![target_h, target_w, c], out)
}

/// Resizes to `target` x `target` and standardizes each channel with
/// `(x - 0.5) / 0.5`, mapping [0, 1] pixels onto [-1, 1].
pub fn preprocess(raw: &Tensor, target: usize) -> Result<Tensor> {
    let mut resized = resize_bilinear(raw, target, target)?;
    for v in resized.data_mut() {
        *v = (*v - 0.5) / 0.5;
    }
    Ok(resized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn mean_pixel_standardizes_to_zero() {
        let img = Tensor::full(vec![5, 5, 3], 0.5);
        let out = preprocess(&img, 5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_size_resize_is_exact() {
        let mut rng = Rng::new(1);
        let img = Tensor::randn(vec![4, 4, 3], 1.0, &mut rng);
        let out = resize_bilinear(&img, 4, 4).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn checkerboard_upscale_matches_hand_computation_at_corners() {
        // 2x2 single-channel-style checkerboard replicated over RGB
        let mut data = Vec::new();
        for v in [1.0, 0.0, 0.0, 1.0] {
            data.extend([v, v, v]);
        }
        let img = Tensor::from_vec(vec![2, 2, 3], data).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // output corners map outside the source grid and clamp to the
        // nearest source pixel, so they equal the input corners
        let at = |y: usize, x: usize| out.data()[(y * 4 + x) * 3];
        assert_eq!(at(0, 0), 1.0);
        assert_eq!(at(0, 3), 0.0);
        assert_eq!(at(3, 0), 0.0);
        assert_eq!(at(3, 3), 1.0);
        // the four center pixels interpolate at (0.25, 0.25)-style
        // offsets: 1*0.75*0.75 + 0*... + 0*... + 1*0.25*0.25 = 0.625
        assert!((at(1, 1) - 0.625).abs() < 1e-12);
        assert!((at(1, 2) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn constant_image_stays_constant_at_any_size() {
        let img = Tensor::full(vec![3, 7, 3], 0.42);
        for (th, tw) in [(1, 1), (2, 9), (13, 4)] {
            let out = resize_bilinear(&img, th, tw).unwrap();
            for v in out.data() {
                assert!((v - 0.42).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn preprocess_output_range_is_bounded() {
        let mut rng = Rng::new(2);
        let data: Vec<f64> = (0..48).map(|_| rng.next_f64()).collect();
        let img = Tensor::from_vec(vec![4, 4, 3], data).unwrap();
        let out = preprocess(&img, 8).unwrap();
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
