//! Finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit mode only: central differences at `h ~ 1e-5` need the
//! mantissa headroom. The check sweeps every element of every parameter
//! block against `(L(p+h) - L(p-h)) / 2h` for the cross-entropy training
//! loss.

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::model::{forward_eval, forward_on_tape, ModelSpec, TrainedModel};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + 1e-8)
}

fn loss_of(
    spec: &ModelSpec,
    params: &[Tensor<f64>],
    batch: &Tensor<f64>,
    labels: &[u32],
) -> Result<f64> {
    let (logits, _) = forward_eval(spec, params, batch, &[])?;
    Ok(ops::cross_entropy(&logits, labels)?.item())
}

/// Checks a model's analytic gradients on one batch. The report carries all
/// per-block failures instead of erroring.
pub fn finite_diff_gradcheck(
    model: &TrainedModel,
    batch: &LabeledDataset,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let spec = &model.spec;
    let mut params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.cast::<f64>()).collect();
    let images = batch.images.cast::<f64>();
    let labels = &batch.labels;

    // analytic gradients
    let mut tape = Tape::<f64>::new();
    let param_ids: Vec<_> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let input = tape.leaf(images.clone(), false);
    let (logits, _) = forward_on_tape(spec, &param_ids, &mut tape, input, &[])?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = param_ids
        .iter()
        .zip(&params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.dims()))
        .collect();

    let mut blocks = Vec::new();
    for (bi, block) in spec.param_blocks()?.iter().enumerate() {
        let mut max_err = 0.0f64;
        let numel = params[bi].numel();
        for e in 0..numel {
            let orig = params[bi].data()[e];
            params[bi].data_mut()[e] = orig + h;
            let plus = loss_of(spec, &params, &images, labels)?;
            params[bi].data_mut()[e] = orig - h;
            let minus = loss_of(spec, &params, &images, labels)?;
            params[bi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[bi].data()[e], numeric));
        }
        blocks.push(BlockCheck {
            name: block.name.clone(),
            elements: numel,
            max_rel_err: max_err,
            passed: max_err < tolerance,
        });
    }
    Ok(GradCheckReport {
        blocks,
        step: h,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;
    use crate::model::{build_model, LayerSpec, ModelSpec, ProbePolicy};

    fn tiny_batch(n: usize, side: usize, seed: u64) -> LabeledDataset {
        let ds = gen_glyphs(2, n, side, side, seed).unwrap();
        ds.subset(&(0..n).collect::<Vec<_>>())
    }

    #[test]
    fn linear_model_matches_closed_form_tolerance() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }],
            input_shape: [1, 8, 8],
            classes: 2,
            probes: ProbePolicy::activations(),
        };
        let model = build_model(&spec, 2).unwrap();
        let batch = tiny_batch(6, 8, 3);
        let report = finite_diff_gradcheck(&model, &batch, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn two_conv_cnn_within_1e5() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2 },
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
            input_shape: [1, 8, 8],
            classes: 2,
            probes: ProbePolicy::activations(),
        };
        let model = build_model(&spec, 4).unwrap();
        let batch = tiny_batch(4, 8, 9);
        let report = finite_diff_gradcheck(&model, &batch, 1e-5, 1e-5).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn zero_parameter_model_gives_empty_report() {
        // flatten-only "model": the 16 pixels act as logits directly, and
        // there is nothing to differentiate
        let spec = ModelSpec {
            layers: vec![LayerSpec::Flatten],
            input_shape: [1, 8, 8],
            classes: 64,
            probes: ProbePolicy::activations(),
        };
        let model = TrainedModel {
            spec,
            params: vec![],
            meta: crate::model::TrainMeta {
                seed: 0,
                epochs_trained: 0,
                dataset_id: String::new(),
            },
        };
        let mut batch = tiny_batch(2, 8, 1);
        batch.classes = 64;
        let report = finite_diff_gradcheck(&model, &batch, 1e-5, 1e-5).unwrap();
        assert!(report.blocks.is_empty());
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }
}
