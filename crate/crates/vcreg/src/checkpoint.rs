//! Checkpoints: parameter data as raw little-endian f64 in a `.bin` file,
//! described by a JSON manifest (`.json`) carrying the model spec, the
//! training seed, and per-parameter name/shape/offset. Loading rebuilds the
//! model from the spec and refuses data that does not match the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vcreg_core::models::{build_convnet, build_mlp, ConvNetSpec, MlpSpec, Model};
use vcreg_core::{Rng, Tensor};

use crate::{fsio, LabError, Result};

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    model: ModelManifest,
    params: Vec<ParamEntry>,
}

/// Exactly one of the two specs is present.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mlp: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    convnet: Option<ConvNetSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f64 elements, not bytes.
    offset: usize,
    len: usize,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
}

fn corrupt(path: &Path, why: impl std::fmt::Display) -> LabError {
    LabError::Runtime(format!("checkpoint {}: {why}", path.display()))
}

/// Write `{dir}/checkpoint.bin` and `{dir}/checkpoint.json`; returns the
/// manifest path.
pub fn save(dir: &Path, model: &Model, seed: u64) -> Result<PathBuf> {
    let mut bin: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for p in model.params() {
        let data = p.tensor.data();
        for v in data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: p.name,
            shape: p.tensor.shape().to_vec(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        model: ModelManifest {
            mlp: model.mlp_spec().cloned(),
            convnet: model.convnet_spec().cloned(),
        },
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| LabError::Runtime(format!("serialize manifest: {e}")))?;
    fsio::atomic_write(&dir.join("checkpoint.bin"), &bin)?;
    let manifest_path = dir.join("checkpoint.json");
    fsio::atomic_write(&manifest_path, format!("{json}\n").as_bytes())?;
    Ok(manifest_path)
}

/// Load from a manifest path; the `.bin` must sit next to it.
pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
    let text = fsio::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(manifest_path, e))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(corrupt(
            manifest_path,
            format!("schema version {} not supported", manifest.schema_version),
        ));
    }
    let bin_path = manifest_path.with_extension("bin");
    let bytes = fsio::read_bytes(&bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt(&bin_path, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    // The init draws are thrown away below; any seed builds the right shapes.
    let mut rng = Rng::new(0);
    let mut model = match (&manifest.model.mlp, &manifest.model.convnet) {
        (Some(spec), None) => Model::Mlp(build_mlp(spec, &mut rng)?),
        (None, Some(spec)) => Model::ConvNet(build_convnet(spec, &mut rng)?),
        _ => {
            return Err(corrupt(
                manifest_path,
                "manifest must name exactly one model spec",
            ))
        }
    };

    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    if names.len() != manifest.params.len() {
        return Err(corrupt(
            manifest_path,
            format!(
                "manifest lists {} parameters, model has {}",
                manifest.params.len(),
                names.len()
            ),
        ));
    }
    for (slot, (tensor, entry)) in model
        .params_mut()
        .into_iter()
        .zip(&manifest.params)
        .enumerate()
    {
        if names[slot] != entry.name {
            return Err(corrupt(
                manifest_path,
                format!("parameter {slot} is `{}`, manifest says `{}`", names[slot], entry.name),
            ));
        }
        if tensor.shape() != entry.shape.as_slice() {
            return Err(corrupt(
                manifest_path,
                format!(
                    "`{}` has shape {:?}, manifest says {:?}",
                    entry.name,
                    tensor.shape(),
                    entry.shape
                ),
            ));
        }
        let end = entry.offset.checked_add(entry.len);
        if entry.len != tensor.numel() || end.is_none_or(|e| e > values.len()) {
            return Err(corrupt(
                &bin_path,
                format!("`{}` does not fit the data file", entry.name),
            ));
        }
        let slice = &values[entry.offset..entry.offset + entry.len];
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(&bin_path, format!("`{}` holds non-finite values", entry.name)));
        }
        *tensor = Tensor::new(entry.shape.clone(), slice.to_vec())?;
    }
    Ok(Checkpoint {
        model,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcreg_core::models::{ConvBlockSpec, MlpSpec};

    fn mlp_model(seed: u64) -> Model {
        let spec = MlpSpec::new(vec![2, 5, 3]).unwrap();
        Model::Mlp(build_mlp(&spec, &mut Rng::new(seed)).unwrap())
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let model = mlp_model(3);
        let manifest = save(dir.path(), &model, 99).unwrap();
        let loaded = load(&manifest).unwrap();
        assert_eq!(loaded.seed, 99);
        for (a, b) in model.params().iter().zip(loaded.model.params().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.bits_equal(b.tensor), "{} changed", a.name);
        }
    }

    #[test]
    fn convnet_round_trips_too() {
        let spec = ConvNetSpec {
            in_channels: 1,
            input_height: 4,
            input_width: 4,
            blocks: vec![ConvBlockSpec {
                channels: 3,
                kernel: 3,
                stride: 2,
            }],
            classes: 2,
        };
        let model = Model::ConvNet(build_convnet(&spec, &mut Rng::new(1)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(dir.path(), &model, 5).unwrap();
        let loaded = load(&manifest).unwrap();
        assert!(matches!(loaded.model, Model::ConvNet(_)));
        for (a, b) in model.params().iter().zip(loaded.model.params().iter()) {
            assert!(a.tensor.bits_equal(b.tensor));
        }
    }

    #[test]
    fn truncated_data_file_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(dir.path(), &mlp_model(4), 0).unwrap();
        let bin = manifest.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(&manifest).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
    }

    #[test]
    fn tampered_shape_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(dir.path(), &mlp_model(4), 0).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"][0]["shape"] = serde_json::json!([5, 2]);
        std::fs::write(&manifest, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load(&manifest).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
