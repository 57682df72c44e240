//! Usable-information estimation: pointwise scores in bits, marginal and
//! conditional entropies under a model family, the depth/information binned
//! correlation, and the depth-separation gap check.
//!
//! All logs here are base 2 (bits). Predicted probabilities are clamped at
//! `2^-30` before taking logs; clamp events are counted, never silent.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelSpec, TrainedModel};
use crate::optim::OptimizerState;
use crate::pd::{Pd, PdRecord};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Probabilities below `2^-MAX_BITS` clamp to it.
pub const MAX_BITS: f64 = 30.0;

const LN2: f64 = std::f64::consts::LN_2;

/// Clamped `-log2 p` from a negative log-likelihood in nats. Returns the
/// bits and whether clamping fired.
fn bits_from_nll(nll_nats: f64) -> (f64, bool) {
    let bits = nll_nats / LN2;
    if bits > MAX_BITS {
        (MAX_BITS, true)
    } else {
        (bits, false)
    }
}

/// Trains a model of the given family on all-zero inputs so its output
/// converges to the label marginal. The zero tensor is the null input.
pub fn train_null_model(
    labels: &[u32],
    classes: usize,
    family: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let [c, h, w] = family.input_shape;
    let images = Tensor::zeros(&[labels.len(), c, h, w]);
    let ds = LabeledDataset::new(images, labels.to_vec(), classes, "null-input".into())?;
    let mut model = build_model(family, seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    train(&mut model, &mut opt, &ds, None, cfg, |_, _, _| Ok(()))?;
    Ok(model)
}

/// Training defaults for null models: the task is to fit a handful of bias
/// parameters, so a short high-rate run converges tightly.
pub fn null_model_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 64,
        learning_rate: 0.05,
        optimizer: crate::optim::OptimizerKind::adam_default(),
        seed,
        early_stop_patience: None,
    }
}

/// `-log2 g[0](y)` per class under the null model (one forward pass of the
/// zero input).
pub fn null_class_bits(null_model: &TrainedModel) -> Result<Vec<f64>> {
    let [c, h, w] = null_model.spec.input_shape;
    let zero = Tensor::zeros(&[1, c, h, w]);
    let logits = null_model.forward(&zero)?;
    let classes = logits.dims()[1];
    (0..classes as u32)
        .map(|y| {
            let nll = crate::ops::neg_log_likelihoods(&logits, &[y])?[0];
            Ok(bits_from_nll(nll).0)
        })
        .collect()
}

/// Marginal entropy estimate `H(Y)` in bits: mean `-log2 g[0](y)` over the
/// given labels.
pub fn marginal_entropy_bits(null_model: &TrainedModel, labels: &[u32]) -> Result<f64> {
    let bits = null_class_bits(null_model)?;
    let sum: f64 = labels.iter().map(|&y| bits[y as usize]).sum();
    Ok(sum / labels.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VEntropyReport {
    /// `H(Y|X)` estimate in bits.
    pub bits: f64,
    /// The same value negated, the sign convention used by difficulty
    /// tables.
    pub negated: f64,
    pub per_sample_bits: Vec<f64>,
    pub clamp_count: usize,
}

/// Conditional entropy `H(Y|X)` in bits: mean `-log2 g'[x](y)` over a
/// held-out dataset.
pub fn conditional_v_entropy(gprime: &TrainedModel, ds: &LabeledDataset) -> Result<VEntropyReport> {
    let per_sample = model_bits(gprime, ds)?;
    let clamp_count = per_sample.iter().filter(|(_, c)| *c).count();
    let per_sample_bits: Vec<f64> = per_sample.into_iter().map(|(b, _)| b).collect();
    let bits = per_sample_bits.iter().sum::<f64>() / per_sample_bits.len() as f64;
    Ok(VEntropyReport {
        bits,
        negated: -bits,
        per_sample_bits,
        clamp_count,
    })
}

/// Per-sample `(-log2 p(y|x), clamped?)` in evaluation chunks.
fn model_bits(model: &TrainedModel, ds: &LabeledDataset) -> Result<Vec<(f64, bool)>> {
    let n = ds.len();
    let chunk = 256usize;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let batch = ds.images.gather_axis0(&idx);
        let logits = model.forward(&batch)?;
        for nll in crate::ops::neg_log_likelihoods(&logits, &ds.labels[i..hi])? {
            out.push(bits_from_nll(nll));
        }
        i = hi;
    }
    Ok(out)
}

/// Pointwise usable-information score of one sample, in bits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PviSample {
    pub pvi_bits: f64,
    pub neg_log2_gprime: f64,
    pub clamped: bool,
}

/// `pvi(x -> y) = -log2 g[0](y) + log2 g'[x](y)`.
pub fn pvi(
    null_model: &TrainedModel,
    gprime: &TrainedModel,
    x: &Tensor<f32>,
    y: u32,
) -> Result<PviSample> {
    let null_bits = null_class_bits(null_model)?;
    let logits = gprime.forward(x)?;
    let nll = crate::ops::neg_log_likelihoods(&logits, &[y])?[0];
    let (gp_bits, clamped) = bits_from_nll(nll);
    Ok(PviSample {
        pvi_bits: null_bits[y as usize] - gp_bits,
        neg_log2_gprime: gp_bits,
        clamped,
    })
}

/// The input-dependent term alone, `log2 g'[x](y)`, which is what varies
/// across samples of one dataset.
pub fn pvi_second_term(gprime: &TrainedModel, x: &Tensor<f32>, y: u32) -> Result<f64> {
    let logits = gprime.forward(x)?;
    let nll = crate::ops::neg_log_likelihoods(&logits, &[y])?[0];
    Ok(-bits_from_nll(nll).0)
}

/// Dataset-level usable-information summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PviRecord {
    pub per_sample_pvi: Vec<f64>,
    pub per_sample_neg_log2_gprime: Vec<f64>,
    /// `H(Y)` estimate in bits.
    pub h_y_bits: f64,
    /// `H(Y|X)` estimate in bits.
    pub h_y_given_x_bits: f64,
    /// `H(Y) - H(Y|X)`.
    pub v_information: f64,
    pub clamp_count: usize,
}

/// Evaluates both entropy estimates and every per-sample score on the same
/// samples, so `mean(pvi) = H(Y) - H(Y|X)` holds to float roundoff.
pub fn pvi_dataset(
    null_model: &TrainedModel,
    gprime: &TrainedModel,
    eval: &LabeledDataset,
) -> Result<PviRecord> {
    let null_bits = null_class_bits(null_model)?;
    let gp = model_bits(gprime, eval)?;
    let n = eval.len() as f64;
    let mut per_sample_pvi = Vec::with_capacity(eval.len());
    let mut per_sample_gp = Vec::with_capacity(eval.len());
    let mut clamp_count = 0usize;
    let mut h_y_sum = 0.0f64;
    let mut h_gp_sum = 0.0f64;
    for (&y, &(gp_bits, clamped)) in eval.labels.iter().zip(&gp) {
        let nb = null_bits[y as usize];
        per_sample_pvi.push(nb - gp_bits);
        per_sample_gp.push(gp_bits);
        clamp_count += usize::from(clamped);
        h_y_sum += nb;
        h_gp_sum += gp_bits;
    }
    let h_y_bits = h_y_sum / n;
    let h_y_given_x_bits = h_gp_sum / n;
    Ok(PviRecord {
        per_sample_pvi,
        per_sample_neg_log2_gprime: per_sample_gp,
        h_y_bits,
        h_y_given_x_bits,
        v_information: h_y_bits - h_y_given_x_bits,
        clamp_count,
    })
}

// ---------------------------------------------------------------------------
// depth / information correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthBin {
    /// Inclusive depth range covered by the bin.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_entropy_bits: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinnedCorrelation {
    pub bins: Vec<DepthBin>,
    /// Depth ranges that held no samples, skipped from the correlation.
    pub skipped_bins: Vec<(usize, usize)>,
    /// Undefined-depth samples excluded from binning.
    pub excluded_undefined: usize,
    /// Spearman rank correlation between bin position and bin mean entropy.
    pub spearman: f64,
}

/// Buckets per-sample conditional entropy by prediction depth and reports
/// the rank correlation between depth bin and mean entropy.
pub fn pd_pvi_binned_correlation(
    pds: &[Pd],
    entropy_bits: &[f64],
    n_probes: usize,
    bin_width: usize,
) -> Result<BinnedCorrelation> {
    if pds.len() != entropy_bits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} depth records vs {} entropy records",
            pds.len(),
            entropy_bits.len()
        )));
    }
    if bin_width == 0 {
        return Err(Error::InvalidArgument("bin width must be >= 1".into()));
    }
    let n_bins = n_probes.div_ceil(bin_width);
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    let mut excluded_undefined = 0usize;
    for (pd, &e) in pds.iter().zip(entropy_bits) {
        match pd {
            Pd::Depth(d) => {
                let b = (d - 1) / bin_width;
                sums[b] += e;
                counts[b] += 1;
            }
            Pd::Undefined => excluded_undefined += 1,
        }
    }
    let mut bins = Vec::new();
    let mut skipped = Vec::new();
    for b in 0..n_bins {
        let lo = b * bin_width + 1;
        let hi = ((b + 1) * bin_width).min(n_probes);
        if counts[b] == 0 {
            skipped.push((lo, hi));
        } else {
            bins.push(DepthBin {
                lo,
                hi,
                count: counts[b],
                mean_entropy_bits: sums[b] / counts[b] as f64,
            });
        }
    }
    let xs: Vec<f64> = bins.iter().map(|b| b.lo as f64).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.mean_entropy_bits).collect();
    let spearman = spearman_rank_correlation(&xs, &ys);
    Ok(BinnedCorrelation {
        bins,
        skipped_bins: skipped,
        excluded_undefined,
        spearman,
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 for
/// fewer than two points or zero variance.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 || xs.len() != ys.len() {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    let denom = (vx * vy).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

// ---------------------------------------------------------------------------
// depth-separation gap check
// ---------------------------------------------------------------------------

/// Per-dataset inputs to the gap check.
#[derive(Debug, Clone)]
pub struct Prop1Input {
    pub pds: Vec<Pd>,
    pub v_information: f64,
    pub h_cond_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop1Verdict {
    Holds,
    GapInsufficient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Report {
    pub n_probes: usize,
    pub l: usize,
    pub k: usize,
    pub psi: f64,
    /// Smallest psi actually achieved by the two observed fractions.
    pub psi_hat: f64,
    pub spurious_frac_le_l: f64,
    pub intervened_frac_gt_k: f64,
    pub separation_satisfied: bool,
    /// `n - psi * max_y(-ln p(y))`; the precondition needs `l` below it.
    pub assumption4_threshold: f64,
    pub assumption4_satisfied: bool,
    pub mean_pd_spurious: Option<f64>,
    pub mean_pd_intervened: Option<f64>,
    pub mean_pd_gap_ok: bool,
    pub neg_h_cond_spurious: f64,
    pub neg_h_cond_intervened: f64,
    pub v_info_spurious: f64,
    pub v_info_intervened: f64,
    pub info_ordering_ok: bool,
    pub verdict: Prop1Verdict,
    /// Min/max observed inter-probe information increments, diagnostics for
    /// the controlled-confidence-growth assumption.
    pub tau_hat: Option<f64>,
    pub eps_hat: Option<f64>,
}

fn defined_fraction(pds: &[Pd], pred: impl Fn(usize) -> bool) -> f64 {
    let mut defined = 0usize;
    let mut hits = 0usize;
    for pd in pds {
        if let Pd::Depth(d) = pd {
            defined += 1;
            hits += usize::from(pred(*d));
        }
    }
    if defined == 0 {
        0.0
    } else {
        hits as f64 / defined as f64
    }
}

fn mean_defined(pds: &[Pd]) -> Option<f64> {
    let depths: Vec<usize> = pds.iter().filter_map(|p| p.depth()).collect();
    (!depths.is_empty()).then(|| depths.iter().sum::<usize>() as f64 / depths.len() as f64)
}

/// Empirically checks the preconditions and the conclusion of the
/// depth-separation argument: a `1 - psi` mass of the spurious dataset at
/// depth `<= l`, a `1 - psi` mass of the intervened dataset at depth `> k`,
/// the arithmetic bound `l < n - psi * max_y(-ln p(y))` (natural log), and
/// the usable-information ordering. The verdict is `Holds` only when the
/// mean-depth gap and the information ordering are both observed.
#[allow(clippy::too_many_arguments)]
pub fn prop1_gap_check(
    spurious: &Prop1Input,
    intervened: &Prop1Input,
    psi: f64,
    l: usize,
    k: usize,
    n_probes: usize,
    class_marginals: &[f64],
    increments: Option<&[f64]>,
) -> Result<Prop1Report> {
    if n_probes < 3 {
        return Err(Error::InvalidArgument(format!(
            "gap check needs >= 3 probes, found {n_probes}"
        )));
    }
    if !(0.0..0.5).contains(&psi) || psi == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "psi must lie in (0, 0.5), found {psi}"
        )));
    }
    if l > k || k > n_probes || l == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= l <= k <= n, found l={l}, k={k}, n={n_probes}"
        )));
    }
    if class_marginals.is_empty() || class_marginals.iter().any(|&p| p <= 0.0 || p > 1.0) {
        return Err(Error::InvalidArgument(
            "class marginals must be positive probabilities".into(),
        ));
    }

    let spurious_frac_le_l = defined_fraction(&spurious.pds, |d| d <= l);
    let intervened_frac_gt_k = defined_fraction(&intervened.pds, |d| d > k);
    let psi_hat = (1.0 - spurious_frac_le_l).max(1.0 - intervened_frac_gt_k);
    let separation_satisfied = spurious_frac_le_l >= 1.0 - psi && intervened_frac_gt_k >= 1.0 - psi;

    let max_neg_ln_prior = class_marginals
        .iter()
        .map(|&p| -p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let assumption4_threshold = n_probes as f64 - psi * max_neg_ln_prior;
    let assumption4_satisfied = (l as f64) < assumption4_threshold;

    let mean_pd_spurious = mean_defined(&spurious.pds);
    let mean_pd_intervened = mean_defined(&intervened.pds);
    let mean_pd_gap_ok = match (mean_pd_spurious, mean_pd_intervened) {
        (Some(s), Some(i)) => s < i,
        _ => false,
    };
    let info_ordering_ok = spurious.v_information > intervened.v_information;

    let verdict = if separation_satisfied && assumption4_satisfied && mean_pd_gap_ok && info_ordering_ok
    {
        Prop1Verdict::Holds
    } else {
        Prop1Verdict::GapInsufficient
    };

    let (tau_hat, eps_hat) = match increments {
        Some(deltas) if !deltas.is_empty() => (
            Some(deltas.iter().copied().fold(f64::INFINITY, f64::min)),
            Some(deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ),
        _ => (None, None),
    };

    Ok(Prop1Report {
        n_probes,
        l,
        k,
        psi,
        psi_hat,
        spurious_frac_le_l,
        intervened_frac_gt_k,
        separation_satisfied,
        assumption4_threshold,
        assumption4_satisfied,
        mean_pd_spurious,
        mean_pd_intervened,
        mean_pd_gap_ok,
        neg_h_cond_spurious: -spurious.h_cond_bits,
        neg_h_cond_intervened: -intervened.h_cond_bits,
        v_info_spurious: spurious.v_information,
        v_info_intervened: intervened.v_information,
        info_ordering_ok,
        verdict,
        tau_hat,
        eps_hat,
    })
}

/// Picks the `(l, k)` pair minimizing the achieved psi over all `l <= k`.
/// Ties prefer smaller `l`, then larger `k`.
pub fn choose_separation(
    spurious_pds: &[Pd],
    intervened_pds: &[Pd],
    n_probes: usize,
) -> (usize, usize, f64) {
    let mut best = (1usize, n_probes, f64::INFINITY);
    for l in 1..=n_probes {
        let frac_s = defined_fraction(spurious_pds, |d| d <= l);
        for k in l..=n_probes {
            let frac_i = defined_fraction(intervened_pds, |d| d > k);
            let psi_hat = (1.0 - frac_s).max(1.0 - frac_i);
            let better = psi_hat < best.2 - 1e-12
                || (psi_hat < best.2 + 1e-12 && (l < best.0 || (l == best.0 && k > best.1)));
            if better {
                best = (l, k, psi_hat);
            }
        }
    }
    best
}

/// Per-probe k-NN usable information in bits: `H(Y) - H_knn(Y|phi_p)`, with
/// the conditional term estimated from the true-class vote shares. Feeds the
/// increment diagnostics of the gap check.
pub fn vknn_information_per_probe(records: &[PdRecord], labels: &[u32], classes: usize) -> Vec<f64> {
    if records.is_empty() {
        return Vec::new();
    }
    let n_probes = records[0].true_fractions.len();
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    let h_y = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    (0..n_probes)
        .map(|p| {
            let h_cond = records
                .iter()
                .map(|r| {
                    let q = (r.true_fractions[p] as f64).max(2f64.powi(-(MAX_BITS as i32)));
                    -q.log2()
                })
                .sum::<f64>()
                / records.len() as f64;
            h_y - h_cond
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_monotone() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up = [0.1, 0.5, 0.9, 2.0];
        let down = [2.0, 0.9, 0.5, 0.1];
        assert!((spearman_rank_correlation(&xs, &up) - 1.0).abs() < 1e-12);
        assert!((spearman_rank_correlation(&xs, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn binned_correlation_entropy_equals_depth() {
        let pds: Vec<Pd> = (1..=8).map(Pd::Depth).collect();
        let entropy: Vec<f64> = (1..=8).map(|d| d as f64).collect();
        let r = pd_pvi_binned_correlation(&pds, &entropy, 8, 2).unwrap();
        assert_eq!(r.bins.len(), 4);
        assert!((r.spearman - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = (1..=8).map(|d| -(d as f64)).collect();
        let r = pd_pvi_binned_correlation(&pds, &anti, 8, 2).unwrap();
        assert!((r.spearman + 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_bins_skipped_and_reported() {
        let pds = vec![Pd::Depth(1), Pd::Depth(8), Pd::Undefined];
        let entropy = vec![0.5, 2.0, 9.0];
        let r = pd_pvi_binned_correlation(&pds, &entropy, 8, 2).unwrap();
        assert_eq!(r.bins.len(), 2);
        assert_eq!(r.skipped_bins, vec![(3, 4), (5, 6)]);
        assert_eq!(r.excluded_undefined, 1);
    }

    #[test]
    fn worked_arithmetic_from_the_proof() {
        // l = 16, n = 121, psi at its sup with class prevalence 1/1000:
        // threshold = 121 - 0.5 * ln(1000) = 121 - 3.4539 and 16 sits below.
        let pds_s = vec![Pd::Depth(10); 10];
        let pds_i = vec![Pd::Depth(121); 10];
        let s = Prop1Input { pds: pds_s, v_information: 0.9, h_cond_bits: 0.1 };
        let i = Prop1Input { pds: pds_i, v_information: 0.5, h_cond_bits: 0.5 };
        let report = prop1_gap_check(
            &s,
            &i,
            0.499999,
            16,
            16,
            121,
            &[0.999, 0.001],
            None,
        )
        .unwrap();
        let expected = 121.0 - 0.499999 * 1000f64.ln();
        assert!((report.assumption4_threshold - expected).abs() < 1e-9);
        assert!((report.assumption4_threshold - (121.0 - 3.45)).abs() < 0.01);
        assert!(report.assumption4_satisfied, "16 < 121 - 3.45 must pass");
    }

    #[test]
    fn identical_datasets_report_gap_insufficient() {
        let pds = vec![Pd::Depth(3), Pd::Depth(4), Pd::Depth(5)];
        let input = Prop1Input { pds, v_information: 0.7, h_cond_bits: 0.3 };
        let report =
            prop1_gap_check(&input, &input.clone(), 0.3, 2, 4, 8, &[0.5, 0.5], None).unwrap();
        assert_eq!(report.verdict, Prop1Verdict::GapInsufficient);
        assert!(!report.info_ordering_ok);
        assert!(!report.mean_pd_gap_ok);
    }

    #[test]
    fn separation_chooser_finds_clean_split() {
        let s: Vec<Pd> = vec![Pd::Depth(1); 9].into_iter().chain([Pd::Depth(2)]).collect();
        let i: Vec<Pd> = vec![Pd::Depth(7); 9].into_iter().chain([Pd::Depth(8)]).collect();
        let (l, k, psi_hat) = choose_separation(&s, &i, 8);
        assert!(psi_hat < 1e-12, "clean split should achieve psi ~ 0");
        assert!(l <= 2 && k >= 2 && l <= k);
    }
}
