//! Checkpoint file: magic `DSCK`, format version, a JSON header (model spec,
//! optimizer scalars, step counter), then parameter and moment tensors in
//! the native tensor encoding. Little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::DstfTensor;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TrainMeta, TrainedModel};
use crate::optim::{OptimizerKind, OptimizerState};

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_spec: ModelSpec,
    meta: TrainMeta,
    optimizer: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    param_count: usize,
    /// 0 when no moment buffers exist (SGD, or Adam before its first step).
    moment_count: usize,
    engine_version: String,
}

pub fn save_checkpoint(
    path: &Path,
    model: &TrainedModel,
    optimizer: &OptimizerState<f32>,
) -> Result<()> {
    let header = Header {
        model_spec: model.spec.clone(),
        meta: model.meta.clone(),
        optimizer: optimizer.kind,
        learning_rate: optimizer.learning_rate,
        step_count: optimizer.step_count,
        param_count: model.params.len(),
        moment_count: optimizer.first_moments.len(),
        engine_version: crate::ENGINE_VERSION.to_string(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(header_json.len() as u32)?;
    w.write_all(&header_json)?;
    for p in &model.params {
        crate::data::write_dstf_to(&mut w, &DstfTensor::F32(p.clone()))?;
    }
    for m in &optimizer.first_moments {
        crate::data::write_dstf_to(&mut w, &DstfTensor::F32(m.clone()))?;
    }
    for v in &optimizer.second_moments {
        crate::data::write_dstf_to(&mut w, &DstfTensor::F32(v.clone()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32_tensor<R: Read>(r: &mut R, file: &str) -> Result<crate::tensor::Tensor<f32>> {
    match crate::data::read_dstf_from(r, file)? {
        DstfTensor::F32(t) => Ok(t),
        other => Err(Error::Format {
            file: file.to_string(),
            context: format!("expected f32 tensor, found {:?}", other.dtype()),
        }),
    }
}

/// Loads a checkpoint. Nothing is returned on any failure: the model and
/// optimizer are rebuilt in full before this returns.
pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, OptimizerState<f32>)> {
    let file = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        file: file.clone(),
        context: "magic".into(),
    })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            file,
            expected: format!("{MAGIC:?}"),
            found: format!("{magic:?}"),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated {
        file: file.clone(),
        context: "version".into(),
    })?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            file,
            found: version,
            supported: VERSION,
        });
    }
    let header_len = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated {
        file: file.clone(),
        context: "header length".into(),
    })? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|_| Error::Truncated {
        file: file.clone(),
        context: "header".into(),
    })?;
    let header: Header = serde_json::from_slice(&header_json)?;

    let mut params = Vec::with_capacity(header.param_count);
    for _ in 0..header.param_count {
        params.push(read_f32_tensor(&mut r, &file)?);
    }
    let mut first_moments = Vec::with_capacity(header.moment_count);
    for _ in 0..header.moment_count {
        first_moments.push(read_f32_tensor(&mut r, &file)?);
    }
    let mut second_moments = Vec::with_capacity(header.moment_count);
    for _ in 0..header.moment_count {
        second_moments.push(read_f32_tensor(&mut r, &file)?);
    }

    // shape consistency against the spec
    let expected = header.model_spec.param_blocks()?;
    if expected.len() != params.len() {
        return Err(Error::Format {
            file,
            context: format!(
                "{} parameter tensors but the spec defines {}",
                params.len(),
                expected.len()
            ),
        });
    }
    for (block, p) in expected.iter().zip(&params) {
        if block.dims != p.dims() {
            return Err(Error::Format {
                file,
                context: format!(
                    "parameter {} has dims {:?}, spec expects {:?}",
                    block.name,
                    p.dims(),
                    block.dims
                ),
            });
        }
    }

    let model = TrainedModel {
        spec: header.model_spec,
        params,
        meta: header.meta,
    };
    let optimizer = OptimizerState {
        kind: header.optimizer,
        learning_rate: header.learning_rate,
        step_count: header.step_count,
        first_moments,
        second_moments,
    };
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;
    use crate::model::{build_model, ModelSpec};
    use crate::train::{train, TrainConfig};

    fn train_for(epochs: usize) -> (TrainedModel, OptimizerState<f32>) {
        let ds = gen_glyphs(2, 30, 16, 16, 40).unwrap();
        let spec = ModelSpec::mlp2([1, 16, 16], 2, [12, 12]);
        let mut model = build_model(&spec, 8).unwrap();
        let mut opt = OptimizerState::adam(0.01);
        let mut cfg = TrainConfig::adam(epochs, 8);
        cfg.batch_size = 16;
        train(&mut model, &mut opt, &ds, None, &cfg, |_, _, _| Ok(())).unwrap();
        (model, opt)
    }

    #[test]
    fn resume_equals_straight_run_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dsck");

        let (model2, opt2) = train_for(2);
        save_checkpoint(&path, &model2, &opt2).unwrap();

        let (mut resumed, mut opt_resumed) = load_checkpoint(&path).unwrap();
        let ds = gen_glyphs(2, 30, 16, 16, 40).unwrap();
        let mut cfg = TrainConfig::adam(3, 8);
        cfg.batch_size = 16;
        train(&mut resumed, &mut opt_resumed, &ds, None, &cfg, |_, _, _| Ok(())).unwrap();

        let (straight, opt_straight) = train_for(3);
        assert_eq!(opt_resumed.step_count, opt_straight.step_count);
        for (a, b) in resumed.params.iter().zip(&straight.params) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dsck");
        let (model, opt) = train_for(1);
        save_checkpoint(&path, &model, &opt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dsck");
        let (model, opt) = train_for(1);
        save_checkpoint(&path, &model, &opt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }
}
