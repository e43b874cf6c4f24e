//! Dataset ingestion: the line-delimited manifest format, image loading
//! and preprocessing, deterministic stratified splitting, and the
//! synthetic dataset generator.

mod image;
mod preprocess;
mod synthetic;

pub use image::{load_image, read_tensor, write_ppm, write_tensor};
pub use preprocess::{preprocess, resize_bilinear};
pub use synthetic::{generate_synthetic, synthetic_examples, SyntheticSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One preprocessed (image, text, label) triplet.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub text: String,
    pub label: usize,
    pub id: String,
}

/// One manifest line on disk. `id` defaults to the zero-padded record
/// index when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: String,
    text: String,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Image path, relative to the manifest's directory.
    pub image: PathBuf,
    pub text: String,
    pub label: usize,
    pub id: String,
}

/// Ordered dataset listing; image paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

/// Parses a line-delimited manifest: one JSON object per line with
/// fields `image`, `text`, `label`, and optional `id`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let content = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("manifest not found: {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line_idx, line) in content.lines().enumerate() {
        let line_no = line_idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if raw.label < 0 || raw.label as usize >= NUM_CLASSES {
            return Err(Error::LabelRange {
                label: raw.label,
                limit: NUM_CLASSES,
                line: line_no,
            });
        }
        let id = raw.id.unwrap_or_else(|| format!("{:06}", records.len()));
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "duplicate id \"{id}\" at line {line_no}"
            )));
        }
        records.push(ManifestRecord {
            image: PathBuf::from(raw.image),
            text: raw.text,
            label: raw.label as usize,
            id,
        });
    }
    Ok(Manifest { records, base_dir })
}

impl Manifest {
    /// Writes the manifest in the same line-delimited format
    /// `load_manifest` reads.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            let raw = RawRecord {
                image: r.image.to_string_lossy().into_owned(),
                text: r.text.clone(),
                label: r.label as i64,
                id: Some(r.id.clone()),
            };
            out.push_str(&serde_json::to_string(&raw).expect("manifest record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Stratified split: within each label, a seeded shuffle then the first
/// ceil(fraction * n) records go to train. Record order within each
/// side follows the original manifest.
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut to_train = vec![false; manifest.records.len()];
    for label in 0..NUM_CLASSES {
        let mut indices: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut indices);
        let n_train = (train_fraction * indices.len() as f64).ceil() as usize;
        for &i in indices.iter().take(n_train) {
            to_train[i] = true;
        }
    }
    let pick = |keep: bool| Manifest {
        records: manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| to_train[*i] == keep)
            .map(|(_, r)| r.clone())
            .collect(),
        base_dir: manifest.base_dir.clone(),
    };
    Ok((pick(true), pick(false)))
}

/// Loads and preprocesses every record, in manifest order.
pub fn load_examples(manifest: &Manifest, target_size: usize) -> Result<Vec<Example>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let raw = load_image(&manifest.base_dir.join(&r.image))?;
            Ok(Example {
                image: preprocess(&raw, target_size)?,
                text: r.text.clone(),
                label: r.label,
                id: r.id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    #[test]
    fn valid_lines_parse_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"image": "a.ppm", "text": "first", "label": 0}"#,
                r#"{"image": "b.ppm", "text": "second", "label": 9}"#,
                r#"{"image": "c.ppm", "text": "third", "label": 4, "id": "custom"}"#,
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[0].text, "first");
        assert_eq!(m.records[0].id, "000000");
        assert_eq!(m.records[2].id, "custom");
        assert_eq!(m.records[1].label, 9);
        assert_eq!(m.base_dir, dir.path());
    }

    #[test]
    fn label_out_of_range_cites_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"image": "a.ppm", "text": "ok", "label": 3}"#,
                r#"{"image": "b.ppm", "text": "bad", "label": 10}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::LabelRange { label: 10, line: 2, .. }));
    }

    #[test]
    fn malformed_line_cites_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[r#"{"image": "a.ppm", "text": "ok", "label": 1}"#, "not json"],
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"image": "a.ppm", "text": "x", "label": 1, "id": "same"}"#,
                r#"{"image": "b.ppm", "text": "y", "label": 2, "id": "same"}"#,
            ],
        );
        assert!(matches!(load_manifest(&path), Err(Error::Data(_))));
    }

    #[test]
    fn tab_containing_text_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            records: vec![ManifestRecord {
                image: "img.ppm".into(),
                text: "tweet\twith\ttabs \"and quotes\"".into(),
                label: 7,
                id: "t".into(),
            }],
            base_dir: dir.path().to_path_buf(),
        };
        let path = dir.path().join("m.jsonl");
        m.write(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records[0].text, m.records[0].text);
    }

    #[test]
    fn large_manifest_parses_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.jsonl");
        let mut content = String::new();
        for i in 0..21_000 {
            content.push_str(&format!(
                "{{\"image\": \"img_{i}.ppm\", \"text\": \"tweet number {i} with some words\", \"label\": {}}}\n",
                i % 10
            ));
        }
        fs::write(&path, content).unwrap();
        let start = std::time::Instant::now();
        let m = load_manifest(&path).unwrap();
        let elapsed = start.elapsed();
        assert_eq!(m.len(), 21_000);
        assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    }

    fn balanced_manifest(n_per_class: usize) -> Manifest {
        let records = (0..n_per_class * NUM_CLASSES)
            .map(|i| ManifestRecord {
                image: format!("{i}.ppm").into(),
                text: format!("text {i}"),
                label: i % NUM_CLASSES,
                id: format!("{i:06}"),
            })
            .collect();
        Manifest {
            records,
            base_dir: ".".into(),
        }
    }

    #[test]
    fn split_hits_paper_proportions() {
        let m = balanced_manifest(2100); // 21000 records
        let (train, test) = split(&m, 16.0 / 21.0, 7).unwrap();
        assert!((train.len() as i64 - 16_000).abs() <= 10, "{}", train.len());
        assert!((test.len() as i64 - 5_000).abs() <= 10, "{}", test.len());
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let m = balanced_manifest(13);
        let (tr1, te1) = split(&m, 0.8, 42).unwrap();
        let (tr2, te2) = split(&m, 0.8, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let (tr3, _) = split(&m, 0.8, 43).unwrap();
        assert_ne!(tr1, tr3);

        let mut ids: Vec<&str> = tr1
            .records
            .iter()
            .chain(te1.records.iter())
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), m.len());
    }

    #[test]
    fn split_is_stratified_per_label() {
        let m = balanced_manifest(10);
        let (train, _) = split(&m, 0.8, 3).unwrap();
        for label in 0..NUM_CLASSES {
            let n = train.records.iter().filter(|r| r.label == label).count();
            assert_eq!(n, 8, "label {label}");
        }
    }

    #[test]
    fn empty_strata_are_permitted() {
        let mut m = balanced_manifest(4);
        m.records.retain(|r| r.label < 3);
        let (train, test) = split(&m, 0.5, 1).unwrap();
        assert_eq!(train.len() + test.len(), m.len());
    }

    #[test]
    fn load_examples_preserves_order_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for i in 0..4 {
            let name = format!("img{i}.ppm");
            let img = Tensor::full(vec![6, 6, 3], i as f64 / 4.0);
            write_ppm(&dir.path().join(&name), &img).unwrap();
            records.push(ManifestRecord {
                image: name.into(),
                text: format!("example {i}"),
                label: i,
                id: format!("{i}"),
            });
        }
        let m = Manifest {
            records,
            base_dir: dir.path().to_path_buf(),
        };
        let examples = load_examples(&m, 4).unwrap();
        assert_eq!(examples.len(), 4);
        for (i, e) in examples.iter().enumerate() {
            assert_eq!(e.image.shape(), &[4, 4, 3]);
            assert_eq!(e.label, i);
            assert!(e.image.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
