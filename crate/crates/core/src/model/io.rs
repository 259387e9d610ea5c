//! Weight directory format shared by models and SAEs: one raw little-endian
//! f32 file per tensor (row-major) plus a JSON sidecar listing names,
//! shapes and configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyModel};
use crate::error::{Error, Result};

pub(crate) const MODEL_SIDECAR: &str = "model.json";
const MODEL_FORMAT: &str = "sae-unlearn/toy-model";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    version: u32,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn write_f32_file(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_file(path: &Path, field: &str, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: e.to_string(),
    })?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Load {
            path: path.to_path_buf(),
            field: field.to_string(),
            message: format!(
                "expected {} bytes ({} floats), found {}",
                expected_len * 4,
                expected_len,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn tensor_file_name(name: &str) -> String {
    format!("{name}.bin")
}

impl ToyModel {
    /// Every parameter tensor in canonical order with its shape.
    pub fn tensors(&self) -> Vec<(String, &[f32], Vec<usize>)> {
        let mut out: Vec<(String, &[f32], Vec<usize>)> = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {
                out.push(($name, $t.as_slice().expect("standard layout"), $t.shape().to_vec()))
            };
        }
        push!("tok_emb".to_string(), self.tok_emb);
        push!("pos_emb".to_string(), self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            push!(format!("blocks.{i}.ln1.gain"), b.ln1.gain);
            push!(format!("blocks.{i}.ln1.bias"), b.ln1.bias);
            push!(format!("blocks.{i}.w_q"), b.w_q);
            push!(format!("blocks.{i}.w_k"), b.w_k);
            push!(format!("blocks.{i}.w_v"), b.w_v);
            push!(format!("blocks.{i}.w_o"), b.w_o);
            push!(format!("blocks.{i}.ln2.gain"), b.ln2.gain);
            push!(format!("blocks.{i}.ln2.bias"), b.ln2.bias);
            push!(format!("blocks.{i}.w_in"), b.w_in);
            push!(format!("blocks.{i}.b_in"), b.b_in);
            push!(format!("blocks.{i}.w_out"), b.w_out);
            push!(format!("blocks.{i}.b_out"), b.b_out);
        }
        push!("ln_f.gain".to_string(), self.ln_f.gain);
        push!("ln_f.bias".to_string(), self.ln_f.bias);
        push!("unembed".to_string(), self.unembed);
        out
    }

    fn tensor_slices_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {
                out.push(($name, $t.as_slice_mut().expect("standard layout")))
            };
        }
        push!("tok_emb".to_string(), self.tok_emb);
        push!("pos_emb".to_string(), self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push!(format!("blocks.{i}.ln1.gain"), b.ln1.gain);
            push!(format!("blocks.{i}.ln1.bias"), b.ln1.bias);
            push!(format!("blocks.{i}.w_q"), b.w_q);
            push!(format!("blocks.{i}.w_k"), b.w_k);
            push!(format!("blocks.{i}.w_v"), b.w_v);
            push!(format!("blocks.{i}.w_o"), b.w_o);
            push!(format!("blocks.{i}.ln2.gain"), b.ln2.gain);
            push!(format!("blocks.{i}.ln2.bias"), b.ln2.bias);
            push!(format!("blocks.{i}.w_in"), b.w_in);
            push!(format!("blocks.{i}.b_in"), b.b_in);
            push!(format!("blocks.{i}.w_out"), b.w_out);
            push!(format!("blocks.{i}.b_out"), b.b_out);
        }
        push!("ln_f.gain".to_string(), self.ln_f.gain);
        push!("ln_f.bias".to_string(), self.ln_f.bias);
        push!("unembed".to_string(), self.unembed);
        out
    }

    /// Visits every parameter tensor mutably, in the order of [`Self::tensors`].
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        for (name, t) in self.tensor_slices_mut() {
            f(&name, t);
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.tensor_slices_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save_model(model: &ToyModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, data, shape) in model.tensors() {
        let file = tensor_file_name(&name);
        write_f32_file(&dir.join(&file), data)?;
        entries.push(TensorEntry { name, shape, file });
    }
    let sidecar = ModelSidecar {
        format: MODEL_FORMAT.to_string(),
        version: 1,
        seed: model.config.seed,
        config: model.config.clone(),
        tensors: entries,
    };
    let path = dir.join(MODEL_SIDECAR);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join(MODEL_SIDECAR);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        field: MODEL_SIDECAR.into(),
        message: e.to_string(),
    })?;
    let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        field: MODEL_SIDECAR.into(),
        message: e.to_string(),
    })?;
    let mut model = ToyModel::zeros(sidecar.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, _, s)| (n, s))
        .collect();
    for (name, shape) in expected {
        let entry = sidecar
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Load {
                path: path.clone(),
                field: name.clone(),
                message: "tensor missing from sidecar".into(),
            })?;
        if entry.shape != shape {
            return Err(Error::Load {
                path: path.clone(),
                field: name.clone(),
                message: format!("shape {:?} does not match config shape {:?}", entry.shape, shape),
            });
        }
        let data = read_f32_file(&dir.join(&entry.file), &name, shape.iter().product())?;
        model
            .tensor_mut(&name)
            .expect("name taken from model")
            .copy_from_slice(&data);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let model = ToyModel::new(ModelConfig::new(8, 2, 2, 13, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn truncated_tensor_names_field() {
        let model = ToyModel::new(ModelConfig::new(8, 1, 2, 5, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        fs::write(dir.path().join("unembed.bin"), [0u8; 12]).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { ref field, .. } if field == "unembed"), "{err}");
    }
}
