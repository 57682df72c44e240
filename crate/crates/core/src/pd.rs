//! Prediction depth: per-sample probe traces, the undefined-PD rule,
//! histograms, epoch-wise evolution, and the early-peak detector.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::optim::OptimizerState;
use crate::probe::{knn_predict_all, probe_embeddings, KnnOutcome, ProbeSet};
use crate::train::{train, TrainConfig};

/// Prediction depth of one sample: 1-based probe position, or undefined when
/// the tail probes are too close to chance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pd {
    Depth(usize),
    Undefined,
}

// JSON form: a probe index number, or the string "undefined" - never a fake
// index.
impl Serialize for Pd {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Pd::Depth(d) => s.serialize_u64(*d as u64),
            Pd::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Pd {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|d| Pd::Depth(d as usize))
                .ok_or_else(|| serde::de::Error::custom("pd must be a positive integer")),
            serde_json::Value::String(s) if s == "undefined" => Ok(Pd::Undefined),
            other => Err(serde::de::Error::custom(format!(
                "pd must be an integer or \"undefined\", found {other}"
            ))),
        }
    }
}

impl Pd {
    pub fn depth(self) -> Option<usize> {
        match self {
            Pd::Depth(d) => Some(d),
            Pd::Undefined => None,
        }
    }
}

/// Per-sample probe trace.
#[derive(Debug, Clone)]
pub struct PdRecord {
    pub sample_id: usize,
    /// Predicted class per probe.
    pub classes: Vec<u32>,
    /// Winning-class vote share per probe.
    pub fractions: Vec<f32>,
    /// Vote share of the sample's true label per probe.
    pub true_fractions: Vec<f32>,
    pub valid: Vec<bool>,
    pub pd: Pd,
}

impl PdRecord {
    /// Validity of the last three probes, e.g. `"TTF"`.
    pub fn valid_tail(&self) -> String {
        let n = self.valid.len();
        self.valid[n.saturating_sub(3)..]
            .iter()
            .map(|&v| if v { 'T' } else { 'F' })
            .collect()
    }

    pub fn final_class(&self) -> u32 {
        *self.classes.last().expect("non-empty probe trace")
    }
}

/// Minimum probe position `p` such that probes `p..=N` are all valid and all
/// predict the final probe's class. Undefined when any of the last three
/// probes is invalid. Mid-trace invalid probes count as disagreement, which
/// pushes the depth later.
pub fn prediction_depth(classes: &[u32], valid: &[bool]) -> Result<Pd> {
    let n = classes.len();
    if n < 3 || valid.len() != n {
        return Err(Error::InvalidArgument(format!(
            "prediction_depth needs >= 3 aligned probes, found {n}"
        )));
    }
    if valid[n - 3..].iter().any(|&v| !v) {
        return Ok(Pd::Undefined);
    }
    let final_class = classes[n - 1];
    let mut depth = n; // position n always qualifies: valid and equal to itself
    for i in (0..n - 1).rev() {
        if valid[i] && classes[i] == final_class {
            depth = i + 1;
        } else {
            break;
        }
    }
    Ok(Pd::Depth(depth))
}

/// Depth histogram over an evaluated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdHistogram {
    /// `counts[i]` = samples with pd = i + 1.
    pub counts: Vec<usize>,
    pub undefined: usize,
    pub total: usize,
    /// Mean depth over defined samples; `None` when every sample is
    /// undefined.
    pub mean_pd: Option<f64>,
}

impl PdHistogram {
    pub fn from_pds(pds: impl IntoIterator<Item = Pd>, n_probes: usize) -> Self {
        let mut counts = vec![0usize; n_probes];
        let mut undefined = 0usize;
        let mut total = 0usize;
        let mut sum = 0usize;
        for pd in pds {
            total += 1;
            match pd {
                Pd::Depth(d) => {
                    counts[d - 1] += 1;
                    sum += d;
                }
                Pd::Undefined => undefined += 1,
            }
        }
        let defined = total - undefined;
        PdHistogram {
            counts,
            undefined,
            total,
            mean_pd: (defined > 0).then(|| sum as f64 / defined as f64),
        }
    }

    pub fn n_probes(&self) -> usize {
        self.counts.len()
    }

    pub fn defined(&self) -> usize {
        self.total - self.undefined
    }
}

fn record_from_outcomes(
    sample_id: usize,
    label: u32,
    outcomes: &[KnnOutcome],
) -> Result<PdRecord> {
    let classes: Vec<u32> = outcomes.iter().map(|o| o.class).collect();
    let valid: Vec<bool> = outcomes.iter().map(|o| o.valid).collect();
    let fractions: Vec<f32> = outcomes.iter().map(|o| o.top_fraction).collect();
    let true_fractions: Vec<f32> = outcomes
        .iter()
        .map(|o| o.votes[label as usize] as f32 / o.votes.iter().sum::<u32>() as f32)
        .collect();
    let pd = prediction_depth(&classes, &valid)?;
    Ok(PdRecord {
        sample_id,
        classes,
        fractions,
        true_fractions,
        valid,
        pd,
    })
}

/// Probes every sample of `eval` and returns the per-sample traces plus the
/// histogram.
pub fn pd_histogram(
    model: &TrainedModel,
    set: &ProbeSet,
    eval: &LabeledDataset,
) -> Result<(PdHistogram, Vec<PdRecord>)> {
    let queries = probe_embeddings(model, &eval.images)?;
    let outcomes = knn_predict_all(set, &queries)?;
    let records: Vec<PdRecord> = outcomes
        .iter()
        .enumerate()
        .map(|(i, per_probe)| record_from_outcomes(i, eval.labels[i], per_probe))
        .collect::<Result<_>>()?;
    let hist = PdHistogram::from_pds(records.iter().map(|r| r.pd), set.n_probes());
    Ok((hist, records))
}

/// Probe parameters bundled for the snapshot pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub bank_size: usize,
    pub k: usize,
    pub delta: f32,
}

impl Default for ProbeParams {
    fn default() -> Self {
        // delta and k from the source of the undefined-PD rule
        ProbeParams {
            bank_size: 400,
            k: 29,
            delta: 0.1,
        }
    }
}

/// One snapshot of the depth distribution during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub histogram: PdHistogram,
}

/// Trains `model` and, at each listed epoch, rebuilds the probe banks from
/// the current parameters and evaluates the depth histogram. Banks are never
/// cached across parameter updates.
#[allow(clippy::too_many_arguments)]
pub fn epoch_snapshot_series(
    model: &mut TrainedModel,
    optimizer: &mut OptimizerState<f32>,
    train_ds: &LabeledDataset,
    reference: &LabeledDataset,
    eval: &LabeledDataset,
    cfg: &TrainConfig,
    probe: &ProbeParams,
    snapshot_epochs: &[usize],
    probe_seed: u64,
) -> Result<Vec<EpochSnapshot>> {
    let mut snapshots = Vec::new();
    train(model, optimizer, train_ds, None, cfg, |epoch, live, _| {
        if snapshot_epochs.contains(&epoch) {
            let set = crate::probe::build_probe_set(
                live,
                reference,
                probe.bank_size,
                probe.k,
                probe.delta,
                probe_seed,
            )?;
            let (histogram, _) = pd_histogram(live, &set, eval)?;
            snapshots.push(EpochSnapshot { epoch, histogram });
        }
        Ok(())
    })?;
    Ok(snapshots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakVerdict {
    Suspicious,
    Clean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyPeakReport {
    pub verdict: PeakVerdict,
    /// Fraction of defined mass inside the first `ceil(alpha * n)` probes.
    pub early_mass: f64,
    pub early_probe_count: usize,
    pub mean_pd: Option<f64>,
    pub mean_pd_reference: f64,
    /// Early probes ranked by count, heaviest first (nonzero only).
    pub peak_probes: Vec<usize>,
}

/// Flags a histogram whose mass concentrates in the first layers: suspicious
/// iff the defined mass within the first `ceil(alpha * n)` probes reaches
/// `mass_threshold`, or the mean depth falls below half the reference mean.
pub fn early_peak_detector(
    hist: &PdHistogram,
    alpha: f64,
    mass_threshold: f64,
    mean_pd_reference: f64,
) -> Result<EarlyPeakReport> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), found {alpha}"
        )));
    }
    let n = hist.n_probes();
    let early = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    let defined = hist.defined();
    let early_count: usize = hist.counts[..early].iter().sum();
    let early_mass = if defined > 0 {
        early_count as f64 / defined as f64
    } else {
        0.0
    };
    let mean_rule = hist
        .mean_pd
        .map_or(false, |m| m < 0.5 * mean_pd_reference);
    let suspicious = early_mass >= mass_threshold || mean_rule;

    let mut peak_probes: Vec<usize> = (1..=early).filter(|&p| hist.counts[p - 1] > 0).collect();
    peak_probes.sort_by(|&a, &b| hist.counts[b - 1].cmp(&hist.counts[a - 1]).then(a.cmp(&b)));

    Ok(EarlyPeakReport {
        verdict: if suspicious {
            PeakVerdict::Suspicious
        } else {
            PeakVerdict::Clean
        },
        early_mass,
        early_probe_count: early,
        mean_pd: hist.mean_pd,
        mean_pd_reference,
        peak_probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn immediate_convergence_is_depth_one() {
        let pd = prediction_depth(&[1, 1, 1, 1], &[true; 4]).unwrap();
        assert_eq!(pd, Pd::Depth(1));
    }

    #[test]
    fn first_disagreement_pushes_depth() {
        let pd = prediction_depth(&[0, 1, 1, 1], &[true; 4]).unwrap();
        assert_eq!(pd, Pd::Depth(2));
    }

    #[test]
    fn invalid_tail_probe_is_undefined() {
        let pd = prediction_depth(&[1, 1, 1, 1], &[true, true, true, false]).unwrap();
        assert_eq!(pd, Pd::Undefined);
        // any of the last three suffices
        let pd = prediction_depth(&[1, 1, 1, 1], &[true, false, true, true]).unwrap();
        assert_eq!(pd, Pd::Undefined);
    }

    #[test]
    fn mid_trace_invalid_counts_as_disagreement() {
        // probe 2 of 6 is invalid; last three are valid
        let classes = [1, 1, 1, 1, 1, 1];
        let valid = [true, false, true, true, true, true];
        let pd = prediction_depth(&classes, &valid).unwrap();
        assert_eq!(pd, Pd::Depth(3));
    }

    #[test]
    fn depth_never_exceeds_probe_count() {
        let pd = prediction_depth(&[0, 1, 0, 1], &[true; 4]).unwrap();
        assert_eq!(pd, Pd::Depth(4));
    }

    #[test]
    fn histogram_mean_and_conservation() {
        let pds = vec![Pd::Depth(1), Pd::Depth(3), Pd::Undefined, Pd::Depth(1), Pd::Depth(3)];
        let h = PdHistogram::from_pds(pds, 4);
        assert_eq!(h.total, 5);
        assert_eq!(h.undefined, 1);
        assert_eq!(h.counts.iter().sum::<usize>() + h.undefined, h.total);
        assert_eq!(h.mean_pd, Some(2.0));
    }

    #[test]
    fn all_depth_one_histogram() {
        let h = PdHistogram::from_pds(vec![Pd::Depth(1); 8], 5);
        assert_eq!(h.mean_pd, Some(1.0));
        assert_eq!(h.undefined, 0);
    }

    #[test]
    fn detector_flags_everything_at_probe_one() {
        let h = PdHistogram::from_pds(vec![Pd::Depth(1); 10], 9);
        let r = early_peak_detector(&h, 0.25, 0.5, 2.0).unwrap();
        assert_eq!(r.verdict, PeakVerdict::Suspicious);
        assert_eq!(r.peak_probes, vec![1]);
    }

    #[test]
    fn detector_passes_uniform_mass_with_observed_reference() {
        let pds: Vec<Pd> = (1..=8).map(Pd::Depth).collect();
        let h = PdHistogram::from_pds(pds, 8);
        let mean = h.mean_pd.unwrap();
        let r = early_peak_detector(&h, 0.25, 0.5, mean).unwrap();
        assert_eq!(r.verdict, PeakVerdict::Clean);
    }

    #[test]
    fn monotone_contract() {
        // appending extra agreeing valid probes never increases pd
        let base = prediction_depth(&[0, 1, 1], &[true; 3]).unwrap();
        let extended = prediction_depth(&[0, 1, 1, 1, 1], &[true; 5]).unwrap();
        assert!(extended.depth().unwrap() <= base.depth().unwrap() + 0);
        // prepending a disagreeing probe never decreases pd
        let prefixed = prediction_depth(&[1, 0, 1, 1], &[true; 4]).unwrap();
        assert!(prefixed.depth().unwrap() >= base.depth().unwrap());
    }
}
