//! Difficulty baselines and the harmful-vs-benign verdict.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{intervene_randomize_spurious, mask_core_only, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{build_model, LayerSpec, ModelSpec, ProbePolicy, TrainedModel};
use crate::optim::OptimizerState;
use crate::pd::{pd_histogram, ProbeParams};
use crate::probe::build_probe_set;
use crate::rng::derive_seed;
use crate::train::{accuracy, train, TrainConfig};

// ---------------------------------------------------------------------------
// ensemble softmax-entropy difficulty
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleFamily {
    Linear,
    ConvReluLinear,
}

impl EnsembleFamily {
    pub fn spec(self, input_shape: [usize; 3], classes: usize) -> ModelSpec {
        let layers = match self {
            EnsembleFamily::Linear => vec![LayerSpec::Flatten, LayerSpec::Dense { units: classes }],
            EnsembleFamily::ConvReluLinear => vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: classes },
            ],
        };
        ModelSpec {
            layers,
            input_shape,
            classes,
            probes: ProbePolicy::activations(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub count: usize,
    pub family: EnsembleFamily,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleEntropyReport {
    /// Per-sample difficulty: mean softmax entropy across members, in nats.
    pub per_sample_nats: Vec<f64>,
    pub mean_nats: f64,
    pub members: usize,
}

/// Softmax entropy in nats per row of a logits matrix.
fn softmax_entropy_nats(logits: &crate::tensor::Tensor<f32>) -> Vec<f64> {
    let c = logits.dims()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let mut z = 0.0f64;
            for &v in row {
                z += ((v as f64) - mx).exp();
            }
            let lz = z.ln();
            let mut h = 0.0f64;
            for &v in row {
                let lp = (v as f64) - mx - lz;
                h -= lp.exp() * lp;
            }
            h
        })
        .collect()
}

/// Trains `count` independently initialized members on the dataset and
/// scores every sample by the mean softmax entropy of the members. Member
/// training runs in parallel; aggregation order is fixed by member index.
pub fn ensemble_entropy(
    ds: &LabeledDataset,
    spec: &EnsembleSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EnsembleEntropyReport> {
    if spec.count < 2 {
        return Err(Error::InvalidArgument(
            "an ensemble needs at least 2 members".into(),
        ));
    }
    let dims = ds.images.dims();
    let family = spec
        .family
        .spec([dims[1], dims[2], dims[3]], ds.classes);

    let per_member: Vec<Vec<f64>> = (0..spec.count)
        .into_par_iter()
        .map(|member| -> Result<Vec<f64>> {
            let member_seed = derive_seed(seed, "ensemble-member", member as u64);
            let mut model = build_model(&family, member_seed)?;
            let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
            let mut member_cfg = cfg.clone();
            member_cfg.seed = member_seed;
            train(&mut model, &mut opt, ds, None, &member_cfg, |_, _, _| Ok(()))?;
            let mut entropies = Vec::with_capacity(ds.len());
            let chunk = 256usize;
            let mut i = 0;
            while i < ds.len() {
                let hi = (i + chunk).min(ds.len());
                let idx: Vec<usize> = (i..hi).collect();
                let logits = model.forward(&ds.images.gather_axis0(&idx))?;
                entropies.extend(softmax_entropy_nats(&logits));
                i = hi;
            }
            Ok(entropies)
        })
        .collect::<Result<_>>()?;

    let n = ds.len();
    let mut per_sample = vec![0.0f64; n];
    for member in &per_member {
        for (o, &e) in per_sample.iter_mut().zip(member) {
            *o += e;
        }
    }
    for v in &mut per_sample {
        *v /= spec.count as f64;
    }
    let mean_nats = per_sample.iter().sum::<f64>() / n as f64;
    Ok(EnsembleEntropyReport {
        per_sample_nats: per_sample,
        mean_nats,
        members: spec.count,
    })
}

// ---------------------------------------------------------------------------
// core-only accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyPair {
    /// Accuracy on the unmasked held-out dominoes.
    pub validation: f64,
    /// Accuracy after blanking the spurious (top) half.
    pub core_only: f64,
}

/// Evaluates a domino-trained model with and without the spurious half.
pub fn core_only_accuracy(model: &TrainedModel, test: &LabeledDataset) -> Result<AccuracyPair> {
    let masked = mask_core_only(test)?;
    Ok(AccuracyPair {
        validation: accuracy(model, test)?,
        core_only: accuracy(model, &masked)?,
    })
}

// ---------------------------------------------------------------------------
// harmfulness verdict
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DifficultyMetric {
    MeanPd,
    Accuracy,
    VInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Harmfulness {
    Harmful,
    Benign,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictConfig {
    pub metric: DifficultyMetric,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub probe: ProbeParams,
    /// Train/validation fractions.
    pub split: (f64, f64),
}

impl VerdictConfig {
    pub fn new(metric: DifficultyMetric, train: TrainConfig) -> Self {
        VerdictConfig {
            metric,
            seeds: vec![1, 2, 3],
            train,
            probe: ProbeParams::default(),
            split: (0.8, 0.2),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarmfulnessReport {
    pub metric: DifficultyMetric,
    pub seeds: Vec<u64>,
    /// Task difficulty on the dataset as given, one entry per seed.
    pub psi_observational: Vec<f64>,
    /// Task difficulty after breaking the spurious correlation.
    pub psi_interventional: Vec<f64>,
    pub verdict: Harmfulness,
}

fn difficulty(
    metric: DifficultyMetric,
    family: &ModelSpec,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
    probe: &ProbeParams,
    seed: u64,
) -> Result<f64> {
    let mut model = build_model(family, seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    train(&mut model, &mut opt, train_ds, None, &run_cfg, |_, _, _| Ok(()))?;
    match metric {
        DifficultyMetric::Accuracy => Ok(1.0 - accuracy(&model, val_ds)?),
        DifficultyMetric::VInfo => {
            // equal label marginals on both sides, so conditional entropy
            // alone carries the usable-information ordering
            Ok(crate::info::conditional_v_entropy(&model, val_ds)?.bits)
        }
        DifficultyMetric::MeanPd => {
            let set = build_probe_set(
                &model,
                train_ds,
                probe.bank_size.min(train_ds.len()),
                probe.k,
                probe.delta,
                derive_seed(seed, "verdict-bank", 0),
            )?;
            let (hist, _) = pd_histogram(&model, &set, val_ds)?;
            // an all-undefined histogram marks the hardest possible outcome
            Ok(hist
                .mean_pd
                .unwrap_or((set.n_probes() + 1) as f64))
        }
    }
}

/// Trains the family on the dataset as given and on its do(s)-intervened
/// counterpart, one pair per seed, and calls the spurious feature harmful
/// when difficulty strictly increases under intervention beyond the
/// across-seed noise margin (non-overlapping min/max).
pub fn harmfulness_verdict(
    family: &ModelSpec,
    ds: &LabeledDataset,
    cfg: &VerdictConfig,
) -> Result<HarmfulnessReport> {
    if ds.spurious.is_none() {
        return Err(Error::Dataset(
            "harmfulness verdict needs a dataset with a recorded spurious attribute".into(),
        ));
    }
    if cfg.metric == DifficultyMetric::MeanPd && family.probe_points()?.len() < 3 {
        return Err(Error::InvalidArgument(
            "mean-pd difficulty needs a model family with at least 3 probe points".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }

    let pairs: Vec<(f64, f64)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(f64, f64)> {
            let split_seed = derive_seed(seed, "verdict-split", 0);
            let parts = ds.split(&[cfg.split.0, cfg.split.1], split_seed)?;
            let intervened = intervene_randomize_spurious(ds, derive_seed(seed, "verdict-do", 0))?;
            let iparts = intervened.split(&[cfg.split.0, cfg.split.1], split_seed)?;
            let obs = difficulty(
                cfg.metric, family, &parts[0], &parts[1], &cfg.train, &cfg.probe, seed,
            )?;
            let int = difficulty(
                cfg.metric, family, &iparts[0], &iparts[1], &cfg.train, &cfg.probe, seed,
            )?;
            Ok((obs, int))
        })
        .collect::<Result<_>>()?;

    let psi_observational: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let psi_interventional: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let max_obs = psi_observational.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_int = psi_interventional.iter().copied().fold(f64::INFINITY, f64::min);
    let verdict = if min_int > max_obs {
        Harmfulness::Harmful
    } else {
        Harmfulness::Benign
    };
    Ok(HarmfulnessReport {
        metric: cfg.metric,
        seeds: cfg.seeds.clone(),
        psi_observational,
        psi_interventional,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn entropy_bounds_hold() {
        let logits = Tensor::from_vec(
            vec![3, 4],
            vec![0.0, 0.0, 0.0, 0.0, 10.0, -10.0, 0.0, 3.0, 100.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let h = softmax_entropy_nats(&logits);
        let max = (4.0f64).ln();
        for v in h {
            assert!((0.0..=max + 1e-12).contains(&v), "entropy {v} out of [0, ln 4]");
        }
    }

    #[test]
    fn uniform_logits_maximize_entropy() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.3, 0.3]).unwrap();
        let h = softmax_entropy_nats(&logits);
        assert!((h[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }
}
