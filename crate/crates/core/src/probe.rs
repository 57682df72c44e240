//! Per-layer k-NN probe classifiers.
//!
//! A probe set holds, for every probe point of a model, a bank of reference
//! embeddings plus labels. Spatial embeddings are average-pooled down to at
//! most 8x8 before flattening; distances are L1 everywhere; ties break
//! deterministically (equal distance: lower reference index; equal votes:
//! lower class id).

use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::ops::adaptive_avg_pool;
use crate::rng::rng_from;
use crate::tensor::Tensor;

use rand::seq::SliceRandom;

/// Spatial embeddings are pooled down to at most this many cells per side.
pub const PROBE_POOL_TARGET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    L1,
}

#[derive(Debug, Clone)]
pub struct ProbeBank {
    /// `[m, d]` flattened reference embeddings.
    pub embeddings: Tensor<f32>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ProbeSet {
    /// 1-based model layer index per probe, strictly increasing.
    pub probe_layers: Vec<usize>,
    pub banks: Vec<ProbeBank>,
    pub k: usize,
    pub delta: f32,
    pub classes: usize,
    pub metric: DistanceMetric,
    /// Dataset indices of the reference samples; identical across probes.
    pub reference_ids: Vec<usize>,
}

/// One probe's k-NN answer for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutcome {
    pub class: u32,
    /// Vote share of the winning class.
    pub top_fraction: f32,
    /// Vote share of class 1; binary tasks only.
    pub positive_fraction: Option<f32>,
    pub votes: Vec<u32>,
    pub valid: bool,
}

/// Flattened, pooled probe embeddings for a batch of images: one `[n, d_i]`
/// matrix per probe point. Queries and banks must go through this same door.
pub fn probe_embeddings(model: &TrainedModel, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let probes = model.spec.probe_points()?;
    let n = images.dims()[0];
    let chunk = 256usize;
    let mut per_probe: Vec<Vec<f32>> = vec![Vec::new(); probes.len()];
    let mut widths: Vec<usize> = vec![0; probes.len()];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = images.gather_axis0(&idx);
        let (_, captured) = model.forward_with_probes(&batch)?;
        for (pi, (_, emb)) in captured.iter().enumerate() {
            let flat = flatten_embedding(emb)?;
            widths[pi] = flat.dims()[1];
            per_probe[pi].extend_from_slice(flat.data());
        }
        start = end;
    }
    per_probe
        .into_iter()
        .zip(widths)
        .map(|(data, d)| Tensor::from_vec(vec![n, d], data))
        .collect()
}

/// Pools a `[n, c, h, w]` activation to at most 8x8 and flattens per sample.
/// Already-flat activations pass through unchanged.
fn flatten_embedding(emb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let pooled = if emb.rank() == 4 {
        adaptive_avg_pool(emb, PROBE_POOL_TARGET, PROBE_POOL_TARGET)?
    } else {
        emb.clone()
    };
    let n = pooled.dims()[0];
    let d: usize = pooled.dims()[1..].iter().product();
    pooled.reshaped(vec![n, d])
}

/// Builds the reference banks from a class-stratified draw of `m` samples.
pub fn build_probe_set(
    model: &TrainedModel,
    reference: &LabeledDataset,
    m: usize,
    k: usize,
    delta: f32,
    seed: u64,
) -> Result<ProbeSet> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("k must be odd, found {k}")));
    }
    if m < k {
        return Err(Error::InvalidArgument(format!(
            "bank size {m} smaller than k = {k}"
        )));
    }
    if m > reference.len() {
        return Err(Error::InvalidArgument(format!(
            "bank size {m} exceeds reference dataset ({})",
            reference.len()
        )));
    }
    if !(0.0..0.5).contains(&delta) || delta == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 0.5), found {delta}"
        )));
    }

    // class-stratified draw: per-class counts differ by at most one
    let classes = reference.classes;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in reference.labels.iter().enumerate() {
        pools[l as usize].push(i);
    }
    let mut rng = rng_from(seed, "probe-bank", 0);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let base = m / classes;
    let extra = m % classes;
    let mut reference_ids = Vec::with_capacity(m);
    for (c, pool) in pools.iter().enumerate() {
        let quota = base + usize::from(c < extra);
        if pool.len() < quota {
            return Err(Error::Dataset(format!(
                "class {c} has {} samples, stratified bank needs {quota}",
                pool.len()
            )));
        }
        reference_ids.extend_from_slice(&pool[..quota]);
    }
    reference_ids.sort_unstable();

    let images = reference.images.gather_axis0(&reference_ids);
    let embeddings = probe_embeddings(model, &images)?;
    let labels: Vec<u32> = reference_ids.iter().map(|&i| reference.labels[i]).collect();
    let banks = embeddings
        .into_iter()
        .map(|e| ProbeBank {
            embeddings: e,
            labels: labels.clone(),
        })
        .collect();
    Ok(ProbeSet {
        probe_layers: model.spec.probe_points()?,
        banks,
        k,
        delta,
        classes,
        metric: DistanceMetric::L1,
        reference_ids,
    })
}

impl ProbeSet {
    pub fn n_probes(&self) -> usize {
        self.probe_layers.len()
    }

    pub fn bank_size(&self) -> usize {
        self.reference_ids.len()
    }
}

fn l1_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        s += (x - y).abs();
    }
    s
}

/// k-NN vote at one probe for one query embedding.
pub fn knn_predict(set: &ProbeSet, probe: usize, query: &[f32]) -> Result<KnnOutcome> {
    let bank = &set.banks[probe];
    let d = bank.embeddings.dims()[1];
    if query.len() != d {
        return Err(Error::ShapeMismatch {
            op: "knn_predict",
            lhs: vec![query.len()],
            rhs: vec![d],
        });
    }
    let m = bank.embeddings.dims()[0];
    let mut dist: Vec<(f32, usize)> = (0..m)
        .map(|i| (l1_distance(bank.embeddings.row(i), query), i))
        .collect();
    dist.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut votes = vec![0u32; set.classes];
    for &(_, i) in dist.iter().take(set.k) {
        votes[bank.labels[i] as usize] += 1;
    }
    let mut class = 0usize;
    for c in 1..set.classes {
        if votes[c] > votes[class] {
            class = c;
        }
    }
    let kf = set.k as f32;
    let top_fraction = votes[class] as f32 / kf;
    // binary validity is the |f - 0.5| >= delta rule; multiclass is the
    // above-chance-by-delta extension
    let (positive_fraction, valid) = if set.classes == 2 {
        let f_pos = votes[1] as f32 / kf;
        (Some(f_pos), (f_pos - 0.5).abs() >= set.delta)
    } else {
        (None, top_fraction >= 1.0 / set.classes as f32 + set.delta)
    };
    Ok(KnnOutcome {
        class: class as u32,
        top_fraction,
        positive_fraction,
        votes,
        valid,
    })
}

/// All probes for all query rows, parallel across samples with
/// order-preserving collection.
pub fn knn_predict_all(
    set: &ProbeSet,
    query_embeddings: &[Tensor<f32>],
) -> Result<Vec<Vec<KnnOutcome>>> {
    if query_embeddings.len() != set.n_probes() {
        return Err(Error::InvalidArgument(format!(
            "{} query matrices for {} probes",
            query_embeddings.len(),
            set.n_probes()
        )));
    }
    let n = query_embeddings[0].dims()[0];
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..set.n_probes())
                .map(|p| knn_predict(set, p, query_embeddings[p].row(i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate_set(copies: usize, label: u32) -> ProbeSet {
        let emb = Tensor::from_vec(vec![copies, 3], vec![0.5; copies * 3]).unwrap();
        ProbeSet {
            probe_layers: vec![1],
            banks: vec![ProbeBank {
                embeddings: emb,
                labels: vec![label; copies],
            }],
            k: 29,
            delta: 0.1,
            classes: 2,
            metric: DistanceMetric::L1,
            reference_ids: (0..copies).collect(),
        }
    }

    #[test]
    fn degenerate_bank_always_votes_its_label() {
        let set = degenerate_set(29, 1);
        let out = knn_predict(&set, 0, &[10.0, -3.0, 0.0]).unwrap();
        assert_eq!(out.class, 1);
        assert_eq!(out.top_fraction, 1.0);
        assert!(out.valid);
    }

    #[test]
    fn paper_validity_threshold_binary() {
        // 15 of 29 positive: f_pos ~ 0.517, margin 0.017 < delta 0.1 -> invalid
        let mut labels = vec![0u32; 29];
        for l in labels.iter_mut().take(15) {
            *l = 1;
        }
        let emb = Tensor::from_vec(vec![29, 1], (0..29).map(|i| i as f32).collect()).unwrap();
        let set = ProbeSet {
            probe_layers: vec![1],
            banks: vec![ProbeBank { embeddings: emb, labels }],
            k: 29,
            delta: 0.1,
            classes: 2,
            metric: DistanceMetric::L1,
            reference_ids: (0..29).collect(),
        };
        let out = knn_predict(&set, 0, &[0.0]).unwrap();
        assert!((out.positive_fraction.unwrap() - 15.0 / 29.0).abs() < 1e-6);
        assert!(!out.valid);
        assert_eq!(out.class, 1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let set = degenerate_set(29, 0);
        assert!(knn_predict(&set, 0, &[1.0, 2.0]).is_err());
    }
}
