//! Soft-kNN head and saliency maps.
//!
//! The head turns a probe's k-NN into a differentiable positive-class score:
//! kernel-weighted vote mass over the K nearest references,
//! `score = sum_{j in N, y_j = 1} exp(-d_j / s) / sum_{j in N} exp(-d_j / s)`,
//! with L1 distances and `s` the median distance within the neighbor set.
//! The analytic gradient includes the dependence of `s` on the query (the
//! median is an order statistic of the distances), which is what makes the
//! finite-difference check pass rather than merely come close.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_eval, forward_on_tape, TrainedModel};
use crate::ops::adaptive_avg_pool;
use crate::probe::{ProbeSet, PROBE_POOL_TARGET};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const SCALE_FLOOR: f64 = 1e-12;

/// Differentiable k-NN head attached to one probe point.
#[derive(Debug, Clone)]
pub struct SoftKnnHead {
    /// 1-based model layer index of the probe the head sits on.
    pub probe_layer: usize,
    /// `[m, d]` reference embeddings (the probe's bank).
    pub bank: Tensor<f32>,
    /// Binary labels for the bank.
    pub labels: Vec<u32>,
    /// Neighborhood size.
    pub k: usize,
}

/// Builds a head on probe `position` of an existing probe set.
pub fn soft_knn_head(set: &ProbeSet, position: usize) -> Result<SoftKnnHead> {
    if set.classes != 2 {
        return Err(Error::InvalidArgument(
            "soft-kNN head needs binary labels in the bank".into(),
        ));
    }
    let bank = &set.banks[position];
    Ok(SoftKnnHead {
        probe_layer: set.probe_layers[position],
        bank: bank.embeddings.clone(),
        labels: bank.labels.clone(),
        k: set.k,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SoftKnnEval<S: Scalar> {
    /// Probability mass assigned to the positive class, in `(0, 1)`.
    pub score: S,
    /// The kernel scale actually used.
    pub scale: S,
    /// Whether the scale hit the floor (all-identical distances).
    pub scale_floored: bool,
}

struct NeighborSet<S: Scalar> {
    /// `(distance, bank index)` of the K nearest, ascending.
    neighbors: Vec<(S, usize)>,
    scale: S,
    scale_floored: bool,
    /// `d(scale)/d(distance_i)` per neighbor position.
    scale_grad: Vec<S>,
}

fn neighbor_set<S: Scalar>(
    bank: &Tensor<S>,
    k: usize,
    query: &[S],
) -> Result<NeighborSet<S>> {
    let m = bank.dims()[0];
    let d = bank.dims()[1];
    if query.len() != d {
        return Err(Error::ShapeMismatch {
            op: "soft_knn_score",
            lhs: vec![query.len()],
            rhs: vec![d],
        });
    }
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!(
            "soft-kNN neighborhood {k} incompatible with bank of {m}"
        )));
    }
    let mut dist: Vec<(S, usize)> = (0..m)
        .map(|i| {
            let row = bank.row(i);
            let mut s = S::ZERO;
            for (&a, &b) in row.iter().zip(query) {
                s += (a - b).abs();
            }
            (s, i)
        })
        .collect();
    dist.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    });
    let neighbors: Vec<(S, usize)> = dist.into_iter().take(k).collect();

    let mut scale_grad = vec![S::ZERO; k];
    let raw_scale = if k % 2 == 1 {
        scale_grad[k / 2] = S::ONE;
        neighbors[k / 2].0
    } else {
        scale_grad[k / 2 - 1] = S::from_f64(0.5);
        scale_grad[k / 2] = S::from_f64(0.5);
        (neighbors[k / 2 - 1].0 + neighbors[k / 2].0) * S::from_f64(0.5)
    };
    let floor = S::from_f64(SCALE_FLOOR);
    let scale_floored = raw_scale <= floor;
    let scale = if scale_floored {
        for g in &mut scale_grad {
            *g = S::ZERO;
        }
        floor
    } else {
        raw_scale
    };
    Ok(NeighborSet {
        neighbors,
        scale,
        scale_floored,
        scale_grad,
    })
}

/// Positive-class kernel mass over the K nearest references.
pub fn soft_knn_score<S: Scalar>(
    bank: &Tensor<S>,
    labels: &[u32],
    k: usize,
    query: &[S],
) -> Result<SoftKnnEval<S>> {
    let ns = neighbor_set(bank, k, query)?;
    let mut pos = S::ZERO;
    let mut total = S::ZERO;
    for &(d, i) in &ns.neighbors {
        let w = (-(d / ns.scale)).exp();
        total += w;
        if labels[i] == 1 {
            pos += w;
        }
    }
    Ok(SoftKnnEval {
        score: pos / total,
        scale: ns.scale,
        scale_floored: ns.scale_floored,
    })
}

/// Score plus its gradient with respect to the query embedding.
pub fn soft_knn_score_grad<S: Scalar>(
    bank: &Tensor<S>,
    labels: &[u32],
    k: usize,
    query: &[S],
) -> Result<(SoftKnnEval<S>, Vec<S>)> {
    let ns = neighbor_set(bank, k, query)?;
    let s = ns.scale;
    let weights: Vec<S> = ns.neighbors.iter().map(|&(d, _)| (-(d / s)).exp()).collect();
    let is_pos: Vec<bool> = ns.neighbors.iter().map(|&(_, i)| labels[i] == 1).collect();

    let mut numer = S::ZERO; // sum of positive weights
    let mut denom = S::ZERO; // sum of all weights
    let mut wd_pos = S::ZERO; // sum_j pos w_j d_j
    let mut wd_all = S::ZERO; // sum_j w_j d_j
    for ((&w, &(d, _)), &p) in weights.iter().zip(&ns.neighbors).zip(&is_pos) {
        denom += w;
        wd_all += w * d;
        if p {
            numer += w;
            wd_pos += w * d;
        }
    }
    let score = numer / denom;

    // d(score)/d(d_i), with the median's contribution through s:
    //   dw_j/dd_i = w_j * (-delta_ij / s + d_j * sg_i / s^2)
    let s2 = s * s;
    let mut grad_q = vec![S::ZERO; query.len()];
    for (i, &(d_i, bank_idx)) in ns.neighbors.iter().enumerate() {
        let _ = d_i;
        let sg = ns.scale_grad[i];
        let w_i = weights[i];
        let d_numer = (if is_pos[i] { -w_i / s } else { S::ZERO }) + sg / s2 * wd_pos;
        let d_denom = -w_i / s + sg / s2 * wd_all;
        let d_score = (d_numer * denom - numer * d_denom) / (denom * denom);
        // chain through the L1 distance
        let row = bank.row(bank_idx);
        for ((g, &q), &r) in grad_q.iter_mut().zip(query).zip(row) {
            let sign = if q > r {
                S::ONE
            } else if q < r {
                -S::ONE
            } else {
                S::ZERO
            };
            *g += d_score * sign;
        }
    }
    Ok((
        SoftKnnEval {
            score,
            scale: s,
            scale_floored: ns.scale_floored,
        },
        grad_q,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMethod {
    GradcamSoftknn,
    InputGrad,
}

/// Nonnegative per-pixel relevance, max-normalized to 1.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// `[height, width]`, values in `[0, 1]`.
    pub values: Tensor<f32>,
    pub probe_layer: usize,
    pub method: SaliencyMethod,
}

/// Divides by the max when any positive relevance exists.
fn max_normalize(mut map: Tensor<f32>) -> Tensor<f32> {
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in map.data_mut() {
            *v /= max;
        }
    }
    map
}

fn pooled_query(activation: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<f32>)> {
    let pooled = adaptive_avg_pool(activation, PROBE_POOL_TARGET, PROBE_POOL_TARGET)?;
    let emb = pooled.data().to_vec();
    Ok((pooled, emb))
}

/// Grad-CAM with the soft-kNN positive-class score as the target: channel
/// weights are the spatial mean of `d(score)/d(activation)`, the map is
/// `relu(sum_c w_c * activation_c)` upsampled to the input size and
/// max-normalized.
pub fn soft_knn_saliency(
    model: &TrainedModel,
    head: &SoftKnnHead,
    image: &Tensor<f32>,
) -> Result<SaliencyMap> {
    let (_, captured) = forward_eval(&model.spec, &model.params, image, &[head.probe_layer])?;
    let activation = &captured
        .first()
        .ok_or_else(|| Error::InvalidArgument("probe layer not reached".into()))?
        .1;
    if activation.rank() != 4 {
        return Err(Error::InvalidArgument(format!(
            "probe layer {} has no spatial structure; use the input-gradient variant",
            head.probe_layer
        )));
    }
    let (pooled, emb) = pooled_query(activation)?;
    let (_, grad_emb) = soft_knn_score_grad(&head.bank, &head.labels, head.k, &emb)?;

    let (c, ph, pw) = (pooled.dims()[1], pooled.dims()[2], pooled.dims()[3]);
    let (h, w) = (activation.dims()[2], activation.dims()[3]);
    // channel weights: spatial mean of the score gradient at the probe
    let mut weights = vec![0.0f32; c];
    for ci in 0..c {
        let mut s = 0.0f32;
        for p in 0..ph * pw {
            s += grad_emb[ci * ph * pw + p];
        }
        weights[ci] = s / (ph * pw) as f32;
    }
    // cam over the full-resolution activation
    let mut cam = vec![0.0f32; h * w];
    let act = activation.data();
    for ci in 0..c {
        let wc = weights[ci];
        for (o, &a) in cam.iter_mut().zip(&act[ci * h * w..(ci + 1) * h * w]) {
            *o += wc * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let cam = Tensor::from_vec(vec![h, w], cam)?;
    let up = bilinear_upsample(&cam, model.spec.input_shape[1], model.spec.input_shape[2])?;
    Ok(SaliencyMap {
        values: max_normalize(up),
        probe_layer: head.probe_layer,
        method: SaliencyMethod::GradcamSoftknn,
    })
}

/// `|d(score)/d(input)|` summed over channels, max-normalized. Works on any
/// probe, spatial or flat.
pub fn input_gradient_saliency(
    model: &TrainedModel,
    head: &SoftKnnHead,
    image: &Tensor<f32>,
) -> Result<SaliencyMap> {
    let mut tape = Tape::<f32>::new();
    let param_ids: Vec<_> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.clone(), false))
        .collect();
    let input = tape.leaf(image.clone(), true);
    let (_, captured) =
        forward_on_tape(&model.spec, &param_ids, &mut tape, input, &[head.probe_layer])?;
    let probe_node = captured
        .first()
        .ok_or_else(|| Error::InvalidArgument("probe layer not reached".into()))?
        .1;
    let emb_node = if tape.value(probe_node).rank() == 4 {
        let pooled = tape.adaptive_avg_pool(probe_node, PROBE_POOL_TARGET, PROBE_POOL_TARGET)?;
        tape.flatten(pooled)?
    } else {
        tape.flatten(probe_node)?
    };
    let emb = tape.value(emb_node).data().to_vec();
    let (_, grad_emb) = soft_knn_score_grad(&head.bank, &head.labels, head.k, &emb)?;
    let seed = Tensor::from_vec(tape.value(emb_node).dims().to_vec(), grad_emb)?;
    let grads = tape.backward_from(emb_node, seed)?;
    let g = grads
        .get(input)
        .ok_or_else(|| Error::InvalidArgument("no gradient reached the input".into()))?;

    let (c, h, w) = (g.dims()[1], g.dims()[2], g.dims()[3]);
    let mut map = vec![0.0f32; h * w];
    for ci in 0..c {
        for (o, &v) in map.iter_mut().zip(&g.data()[ci * h * w..(ci + 1) * h * w]) {
            *o += v.abs();
        }
    }
    let map = Tensor::from_vec(vec![h, w], map)?;
    Ok(SaliencyMap {
        values: max_normalize(map),
        probe_layer: head.probe_layer,
        method: SaliencyMethod::InputGrad,
    })
}

/// Bilinear upsampling (corner-aligned) of a `[h, w]` map.
pub fn bilinear_upsample(map: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    if h == out_h && w == out_w {
        return Ok(map.clone());
    }
    let data = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    let fy = if out_h > 1 { (h - 1) as f32 / (out_h - 1) as f32 } else { 0.0 };
    let fx = if out_w > 1 { (w - 1) as f32 / (out_w - 1) as f32 } else { 0.0 };
    for r in 0..out_h {
        let y = r as f32 * fy;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f32;
        for c in 0..out_w {
            let x = c as f32 * fx;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = x - x0 as f32;
            let top = data[y0 * w + x0] * (1.0 - tx) + data[y0 * w + x1] * tx;
            let bot = data[y1 * w + x0] * (1.0 - tx) + data[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    Tensor::from_vec(vec![out_h, out_w], out)
}

/// Mean saliency inside an axis-aligned box vs outside it; the evidence ratio
/// used when judging whether a map focuses on a patch.
pub fn inside_outside_ratio(
    map: &Tensor<f32>,
    top_left: (usize, usize),
    side: usize,
) -> (f64, f64) {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let (r0, c0) = top_left;
    let mut inside = 0.0f64;
    let mut n_in = 0usize;
    let mut outside = 0.0f64;
    let mut n_out = 0usize;
    for r in 0..h {
        for c in 0..w {
            let v = map.data()[r * w + c] as f64;
            if r >= r0 && r < r0 + side && c >= c0 && c < c0 + side {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    (
        inside / n_in.max(1) as f64,
        outside / n_out.max(1) as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bank(m: usize, d: usize, seed: u64) -> (Tensor<f64>, Vec<u32>) {
        let mut rng = crate::rng::rng_from(seed, "softknn-test", 0);
        let data: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u32> = (0..m).map(|i| (i % 2) as u32).collect();
        (Tensor::from_vec(vec![m, d], data).unwrap(), labels)
    }

    #[test]
    fn all_positive_neighbors_score_one() {
        let (bank, _) = random_bank(12, 4, 1);
        let labels = vec![1u32; 12];
        let q = vec![0.1, 0.2, -0.3, 0.4];
        let eval = soft_knn_score(&bank, &labels, 5, &q).unwrap();
        assert!((eval.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_negative_neighbors_score_zero() {
        let (bank, _) = random_bank(12, 4, 2);
        let labels = vec![0u32; 12];
        let q = vec![0.0; 4];
        let eval = soft_knn_score(&bank, &labels, 5, &q).unwrap();
        assert!(eval.score.abs() < 1e-12);
    }

    #[test]
    fn equidistant_half_positive_scores_half() {
        // four references at L1 distance 1 from the origin, two per class
        let bank = Tensor::from_vec(
            vec![4, 2],
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        )
        .unwrap();
        let labels = vec![1, 0, 1, 0];
        let eval = soft_knn_score(&bank, &labels, 4, &[0.0, 0.0]).unwrap();
        assert!((eval.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_distances_floor_the_scale() {
        let bank = Tensor::from_vec(vec![3, 2], vec![0.5; 6]).unwrap();
        let labels = vec![1, 0, 1];
        let eval = soft_knn_score(&bank, &labels, 3, &[0.5, 0.5]).unwrap();
        assert!(eval.scale_floored);
        assert!(eval.scale > 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (bank, labels) = random_bank(40, 6, 3);
        let mut rng = crate::rng::rng_from(9, "softknn-query", 0);
        for trial in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, grad) = soft_knn_score_grad(&bank, &labels, 7, &q).unwrap();
            let h = 1e-6;
            for e in 0..q.len() {
                let mut qp = q.clone();
                qp[e] += h;
                let plus = soft_knn_score(&bank, &labels, 7, &qp).unwrap().score;
                qp[e] = q[e] - h;
                let minus = soft_knn_score(&bank, &labels, 7, &qp).unwrap().score;
                let numeric = (plus - minus) / (2.0 * h);
                let err = (grad[e] - numeric).abs() / grad[e].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    err < 1e-5,
                    "trial {trial} dim {e}: analytic {} numeric {numeric}",
                    grad[e]
                );
            }
        }
    }

    #[test]
    fn normalization_scale_invariant() {
        let map = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let a = max_normalize(map.clone());
        let b = max_normalize(map.map(|v| v * 37.5));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_preserves_constant_maps() {
        let map = Tensor::from_vec(vec![2, 2], vec![0.7; 4]).unwrap();
        let up = bilinear_upsample(&map, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
