//! Synthetic emoticon dataset: each class pairs a distinctive image
//! recipe (base hue plus a bar or disk whose position tracks the class)
//! with texts built from class keywords and shared filler words.

use std::fs;
use std::path::Path;

use crate::contrastive::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{write_ppm, Manifest, ManifestRecord};

const KEYWORDS: [[&str; 4]; NUM_CLASSES] = [
    ["thinking", "hmm", "wonder", "pondering"],
    ["laughing", "haha", "funny", "hilarious"],
    ["love", "heart", "adore", "sweet"],
    ["fire", "lit", "blazing", "sizzling"],
    ["sad", "tears", "crying", "heartbroken"],
    ["cool", "shades", "chill", "smooth"],
    ["wow", "amazed", "shocked", "speechless"],
    ["party", "confetti", "celebrate", "cheers"],
    ["angry", "furious", "rage", "annoyed"],
    ["thumbs", "approve", "nice", "solid"],
];

const FILLERS: [&str; 12] = [
    "today", "just", "really", "the", "vibes", "so", "very", "right", "now", "this", "mood", "all",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Optional per-class counts overriding the balanced default.
    pub class_counts: Option<Vec<usize>>,
}

impl SyntheticSpec {
    pub fn new(n_per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_per_class,
            image_size,
            seed,
            class_counts: None,
        }
    }

    fn count_for(&self, class: usize) -> usize {
        match &self.class_counts {
            Some(counts) => counts.get(class).copied().unwrap_or(0),
            None => self.n_per_class,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Raw [0, 1] image for one class: class hue background, a class-placed
/// disk (even classes) or horizontal bar (odd classes), plus seeded
/// Gaussian pixel noise with sigma 0.05.
pub fn synthetic_image(class: usize, image_size: usize, rng: &mut Rng) -> Tensor {
    let hue = class as f64 * 36.0;
    let background = hsv_to_rgb(hue, 0.45, 0.55);
    let foreground = hsv_to_rgb(hue + 40.0, 0.9, 0.95);
    let t = class as f64 / NUM_CLASSES as f64;
    let size = image_size as f64;
    let mut data = Vec::with_capacity(image_size * image_size * 3);
    for y in 0..image_size {
        for x in 0..image_size {
            let inside = if class % 2 == 0 {
                let cx = (0.3 + 0.4 * t) * size;
                let cy = (0.7 - 0.4 * t) * size;
                let r = 0.22 * size;
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy <= r * r
            } else {
                let center = (0.2 + 0.6 * t) * size;
                let half = 0.09 * size;
                (y as f64 - center).abs() <= half
            };
            let base = if inside { foreground } else { background };
            for ch in 0..3 {
                data.push((base[ch] + 0.05 * rng.normal()).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(vec![image_size, image_size, 3], data).expect("synthetic image shape")
}

/// Text built from two distinct class keywords and seeded filler words.
pub fn synthetic_text(class: usize, rng: &mut Rng) -> String {
    let kws = &KEYWORDS[class];
    let k1 = kws[rng.next_range(kws.len())];
    let mut k2 = kws[rng.next_range(kws.len())];
    while k2 == k1 {
        k2 = kws[rng.next_range(kws.len())];
    }
    let f = |rng: &mut Rng| FILLERS[rng.next_range(FILLERS.len())];
    match rng.next_range(3) {
        0 => format!("{} {k1} {} {k2}", f(rng), f(rng)),
        1 => format!("{k1} {} {k2} {} {}", f(rng), f(rng), f(rng)),
        _ => format!("{} {} {k1} {k2} {}", f(rng), f(rng), f(rng)),
    }
}

/// In-memory counterpart of [`generate_synthetic`]: the same recipe,
/// already preprocessed for the encoders, with no disk round-trip or
/// 8-bit quantization.
pub fn synthetic_examples(n_per_class: usize, image_size: usize, seed: u64) -> Vec<super::Example> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for i in 0..n_per_class {
            let raw = synthetic_image(class, image_size, &mut rng);
            let text = synthetic_text(class, &mut rng);
            out.push(super::Example {
                image: super::preprocess(&raw, image_size).expect("synthetic image preprocess"),
                text,
                label: class,
                id: format!("c{class}_{i:04}"),
            });
        }
    }
    out
}

/// Writes P6 images under `dir/images` plus `dir/manifest.jsonl`, and
/// returns the manifest. Identical seeds produce bitwise-identical
/// files.
pub fn generate_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = Rng::new(spec.seed);
    let mut records = Vec::new();
    for class in 0..NUM_CLASSES {
        for i in 0..spec.count_for(class) {
            let image = synthetic_image(class, spec.image_size, &mut rng);
            let text = synthetic_text(class, &mut rng);
            let name = format!("images/img_c{class}_{i:04}.ppm");
            write_ppm(&dir.join(&name), &image)?;
            records.push(ManifestRecord {
                image: name.into(),
                text,
                label: class,
                id: format!("c{class}_{i:04}"),
            });
        }
    }
    let manifest = Manifest {
        records,
        base_dir: dir.to_path_buf(),
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_image, load_manifest};

    #[test]
    fn cardinality_is_n_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), &SyntheticSpec::new(4, 8, 1)).unwrap();
        assert_eq!(m.len(), 40);
        for label in 0..NUM_CLASSES {
            assert_eq!(m.records.iter().filter(|r| r.label == label).count(), 4);
        }
        // the manifest on disk matches the returned one
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.records, m.records);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(2, 8, 99);
        let ma = generate_synthetic(dir_a.path(), &spec).unwrap();
        generate_synthetic(dir_b.path(), &spec).unwrap();
        for r in &ma.records {
            let a = fs::read(dir_a.path().join(&r.image)).unwrap();
            let b = fs::read(dir_b.path().join(&r.image)).unwrap();
            assert_eq!(a, b, "{}", r.image.display());
        }
        assert_eq!(
            fs::read(dir_a.path().join("manifest.jsonl")).unwrap(),
            fs::read(dir_b.path().join("manifest.jsonl")).unwrap()
        );
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let err = generate_synthetic(
            Path::new("/proc/no_such_mount/x"),
            &SyntheticSpec::new(1, 4, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn imbalance_profile_overrides_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::new(0, 8, 5);
        spec.class_counts = Some(vec![3, 1, 0, 0, 0, 0, 0, 0, 0, 2]);
        let m = generate_synthetic(dir.path(), &spec).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.records.iter().filter(|r| r.label == 0).count(), 3);
        assert_eq!(m.records.iter().filter(|r| r.label == 9).count(), 2);
    }

    #[test]
    fn texts_contain_two_class_keywords() {
        let mut rng = Rng::new(3);
        for class in 0..NUM_CLASSES {
            for _ in 0..20 {
                let text = synthetic_text(class, &mut rng);
                let hits = text
                    .split_whitespace()
                    .filter(|w| KEYWORDS[class].contains(w))
                    .count();
                assert!(hits >= 2, "class {class}: {text}");
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_classes_on_raw_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), &SyntheticSpec::new(8, 16, 7)).unwrap();
        let images: Vec<(usize, Vec<f64>)> = m
            .records
            .iter()
            .map(|r| {
                let img = load_image(&dir.path().join(&r.image)).unwrap();
                (r.label, img.data().to_vec())
            })
            .collect();
        let dim = images[0].1.len();
        let mut centroids = vec![vec![0.0; dim]; NUM_CLASSES];
        let mut counts = vec![0usize; NUM_CLASSES];
        for (label, pixels) in &images {
            counts[*label] += 1;
            for (c, p) in centroids[*label].iter_mut().zip(pixels) {
                *c += p;
            }
        }
        for (centroid, n) in centroids.iter_mut().zip(&counts) {
            for c in centroid.iter_mut() {
                *c /= *n as f64;
            }
        }
        let correct = images
            .iter()
            .filter(|(label, pixels)| {
                let best = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(pixels).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = b.iter().zip(pixels).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                best == *label
            })
            .count();
        let accuracy = correct as f64 / images.len() as f64;
        assert!(accuracy >= 0.9, "nearest-centroid accuracy {accuracy}");
    }
}
