//! Weight checkpoints: a self-describing little-endian binary container.
//!
//! Layout:
//!   magic "SLMCKPT1" (8 bytes)
//!   u32 config JSON length, then the JSON-serialized model configuration
//!   u32 tensor count, then per tensor:
//!     u32 name length, name bytes,
//!     u32 rows, u32 cols,
//!     rows*cols f64 values, row-major, little-endian
//! Trainable parameters are stored first (by store index), then the frozen
//! tensors under reserved names.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::numkit::{Real, Tensor2D};

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

const MAGIC: &[u8; 8] = b"SLMCKPT1";
const FROZEN_VISION_PROJ: &str = "frozen.vision_proj";
const FROZEN_SYMBOL_TABLE: &str = "frozen.symbol_table";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("config block is not valid JSON: {0}")]
    Config(#[from] serde_json::Error),
    #[error("tensor {name}: expected {expect_rows}x{expect_cols}, file has {rows}x{cols}")]
    ShapeMismatch {
        name: String,
        expect_rows: usize,
        expect_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint has {got} tensors, model expects {want}")]
    TensorCount { got: usize, want: usize },
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_tensor<T: Real>(w: &mut impl Write, name: &str, t: &Tensor2D<T>) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.rows as u32)?;
    write_u32(w, t.cols as u32)?;
    for &v in &t.data {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor2D<f64>)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8_lossy(&name).into_owned();
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Tensor2D::from_vec(rows, cols, data)))
}

pub fn save<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(&cfg)?;
    let n = model.store.len() + 2;
    write_u32(&mut w, n as u32)?;
    for p in &model.store.params {
        write_tensor(&mut w, &p.name, &p.value)?;
    }
    write_tensor(&mut w, FROZEN_VISION_PROJ, &model.frozen.vision_proj)?;
    write_tensor(&mut w, FROZEN_SYMBOL_TABLE, &model.frozen.symbol_table)?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    Ok(serde_json::from_slice(&cfg)?)
}

/// Rebuild a model from a checkpoint. The stored configuration defines the
/// parameter layout; every tensor must match its expected shape exactly.
pub fn load<T: Real>(path: &Path, seed: u64) -> Result<Model<T>> {
    let cfg = read_config(path)?;
    let mut model = Model::<T>::init(cfg, seed).map_err(|e| {
        CheckpointError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    })?;

    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    let len = read_u32(&mut r)? as usize;
    let mut skip = vec![0u8; len];
    r.read_exact(&mut skip)?;
    let n = read_u32(&mut r)? as usize;
    let want = model.store.len() + 2;
    if n != want {
        return Err(CheckpointError::TensorCount { got: n, want });
    }
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..n {
        let (name, t) = read_tensor(&mut r)?;
        loaded.insert(name, t);
    }
    let assign = |name: &str, dst: &mut Tensor2D<T>| -> Result<()> {
        let src = loaded
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if src.rows != dst.rows || src.cols != dst.cols {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expect_rows: dst.rows,
                expect_cols: dst.cols,
                rows: src.rows,
                cols: src.cols,
            });
        }
        *dst = Tensor2D::from_f64(src);
        Ok(())
    };
    for i in 0..model.store.len() {
        let name = model.store.params[i].name.clone();
        assign(&name, &mut model.store.params[i].value)?;
    }
    assign(FROZEN_VISION_PROJ, &mut model.frozen.vision_proj)?;
    assign(FROZEN_SYMBOL_TABLE, &mut model.frozen.symbol_table)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Frame, TimedToken};
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_f64_weights_and_logits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: Model<f64> = Model::init(ModelConfig::tiny(24), 4).unwrap();
        save(&path, &model).unwrap();
        let back: Model<f64> = load(&path, 0).unwrap();
        for (a, b) in model.store.params.iter().zip(back.store.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data, b.value.data);
        }
        assert_eq!(model.frozen.vision_proj.data, back.frozen.vision_proj.data);
        let text: Vec<TimedToken> = (0..5)
            .map(|i| TimedToken { id: i, time: i as f64 })
            .collect();
        let frames = [model.encode_frame(&Frame::Symbolic(1), 0.0).unwrap()];
        let la = model.forward(&text, &frames).unwrap();
        let lb = back.forward(&text, &frames).unwrap();
        assert_eq!(la.data, lb.data);
    }

    #[test]
    fn config_travels_with_weights() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = ModelConfig::tiny(24);
        cfg.gate_kind = crate::model::GateKind::Tanh;
        let model: Model<f64> = Model::init(cfg.clone(), 4).unwrap();
        save(&path, &model).unwrap();
        assert_eq!(read_config(&path).unwrap(), cfg);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(
            read_config(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: Model<f64> = Model::init(ModelConfig::tiny(24), 4).unwrap();
        save(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load::<f64>(&path, 0).is_err());
    }
}
