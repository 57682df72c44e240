//! Datasets: synthetic generators with controllable spurious correlations,
//! external ingestion, and the native on-disk formats.

mod dstf;
mod glyphs;
mod idx;
mod spurious;

pub use dstf::{load_tensor, read_dstf_from, save_tensor, write_dstf_to, DstfTensor};
pub use glyphs::{gen_glyphs, gen_glyphs_with, GlyphParams};
pub use idx::load_idx;
pub use spurious::{
    compose_dominoes, inject_patch, intervene_randomize_spurious, mask_core_only, SpuriousKind,
    SpuriousSpec,
};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Labeled image dataset. Pixels live in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `[n, channels, height, width]`
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub classes: usize,
    /// Present whenever a generator injected a spurious feature.
    pub spurious: Option<SpuriousRecord>,
    pub provenance: String,
    /// Set for domino compositions: number of top (spurious-half) rows.
    pub domino_top_rows: Option<usize>,
}

/// Per-sample spurious attribute plus enough context to re-randomize it.
#[derive(Debug, Clone)]
pub struct SpuriousRecord {
    /// Attribute id per sample (for patches: which class's location was used;
    /// for dominoes: the top image's label).
    pub attrs: Vec<u32>,
    pub spec: Option<SpuriousSpec>,
    /// Pristine images from before injection; required for interventions.
    pub base_images: Option<Tensor<f32>>,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u32>, classes: usize, provenance: String) -> Result<Self> {
        let ds = LabeledDataset {
            images,
            labels,
            classes,
            spurious: None,
            provenance,
            domino_top_rows: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [n,c,h,w], found {:?}",
                self.images.dims()
            )));
        }
        if self.images.dims()[0] != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                self.images.dims()[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        if self
            .images
            .data()
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        if let Some(rec) = &self.spurious {
            if rec.attrs.len() != self.labels.len() {
                return Err(Error::Dataset("spurious record length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Image `i` as a `[1, c, h, w]` batch.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let one = self.images.index_axis0(i);
        let mut dims = vec![1];
        dims.extend_from_slice(one.dims());
        one.reshaped(dims).expect("image reshape")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather_axis0(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            spurious: self.spurious.as_ref().map(|rec| SpuriousRecord {
                attrs: indices.iter().map(|&i| rec.attrs[i]).collect(),
                spec: rec.spec.clone(),
                base_images: rec.base_images.as_ref().map(|b| b.gather_axis0(indices)),
            }),
            provenance: self.provenance.clone(),
            domino_top_rows: self.domino_top_rows,
        }
    }

    /// Disjoint splits by shuffled index, seed-stable. Fractions must sum to
    /// at most 1; the last split absorbs rounding.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
        let idx = split_indices(self.len(), fractions, seed)?;
        Ok(idx.iter().map(|part| self.subset(part)).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Shuffles `0..n` under the seed and partitions by cumulative fraction.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f <= 0.0) || total > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed, "split", 0);
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let take = if i + 1 == fractions.len() && (total - 1.0).abs() < 1e-9 {
            n - start
        } else {
            ((n as f64) * f).round() as usize
        };
        let end = (start + take).min(n);
        out.push(order[start..end].to_vec());
        start = end;
    }
    Ok(out)
}

/// On-disk index of a saved dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: String,
    pub labels: String,
    pub spurious: Option<String>,
    pub classes: usize,
    pub provenance: String,
}

/// Writes `{name}.images.dstf`, `{name}.labels.dstf`, optionally
/// `{name}.spurious.dstf`, and the manifest JSON. Returns the manifest path.
pub fn save_dataset(dir: &Path, name: &str, ds: &LabeledDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let images_file = format!("{name}.images.dstf");
    let labels_file = format!("{name}.labels.dstf");
    save_tensor(&dir.join(&images_file), &DstfTensor::F32(ds.images.clone()))?;
    save_tensor(
        &dir.join(&labels_file),
        &DstfTensor::U32 {
            dims: vec![ds.labels.len()],
            data: ds.labels.clone(),
        },
    )?;
    let spurious_file = if let Some(rec) = &ds.spurious {
        let f = format!("{name}.spurious.dstf");
        save_tensor(
            &dir.join(&f),
            &DstfTensor::U32 {
                dims: vec![rec.attrs.len()],
                data: rec.attrs.clone(),
            },
        )?;
        Some(f)
    } else {
        None
    };
    let mut provenance = ds.provenance.clone();
    if let Some(rows) = ds.domino_top_rows {
        provenance.push_str(&format!("|top_rows={rows}"));
    }
    let manifest = DatasetManifest {
        images: images_file,
        labels: labels_file,
        spurious: spurious_file,
        classes: ds.classes,
        provenance,
    };
    let path = dir.join(format!("{name}.manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let images = match load_tensor(&dir.join(&manifest.images))? {
        DstfTensor::F32(t) => t,
        other => {
            return Err(Error::Format {
                file: manifest.images.clone(),
                context: format!("expected f32 images, found {:?}", other.dtype()),
            })
        }
    };
    let labels = match load_tensor(&dir.join(&manifest.labels))? {
        DstfTensor::U32 { data, .. } => data,
        other => {
            return Err(Error::Format {
                file: manifest.labels.clone(),
                context: format!("expected u32 labels, found {:?}", other.dtype()),
            })
        }
    };
    let spurious = match &manifest.spurious {
        Some(f) => match load_tensor(&dir.join(f))? {
            DstfTensor::U32 { data, .. } => Some(SpuriousRecord {
                attrs: data,
                spec: None,
                base_images: None,
            }),
            other => {
                return Err(Error::Format {
                    file: f.clone(),
                    context: format!("expected u32 attributes, found {:?}", other.dtype()),
                })
            }
        },
        None => None,
    };
    let domino_top_rows = manifest
        .provenance
        .split('|')
        .find_map(|part| part.strip_prefix("top_rows="))
        .and_then(|v| v.parse::<usize>().ok());
    let ds = LabeledDataset {
        images,
        labels,
        classes: manifest.classes,
        spurious,
        provenance: manifest.provenance,
        domino_top_rows,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        let images = Tensor::from_vec(vec![4, 1, 2, 2], vec![0.5; 16]).unwrap();
        LabeledDataset::new(images, vec![0, 1, 0, 1], 2, "tiny".into()).unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_stable() {
        let parts = split_indices(100, &[0.8, 0.2], 9).unwrap();
        assert_eq!(parts[0].len() + parts[1].len(), 100);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(parts, split_indices(100, &[0.8, 0.2], 9).unwrap());
        assert_ne!(parts, split_indices(100, &[0.8, 0.2], 10).unwrap());
    }

    #[test]
    fn label_range_validated() {
        let images = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(LabeledDataset::new(images, vec![2], 2, "bad".into()).is_err());
    }

    #[test]
    fn pixel_range_validated() {
        let images = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        assert!(LabeledDataset::new(images, vec![0], 2, "bad".into()).is_err());
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let manifest = save_dataset(dir.path(), "t", &ds).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.classes, 2);
    }
}
