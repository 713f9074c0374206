//! Checkpoint layout: a directory holding `manifest.json` (architecture,
//! counters, free-form extras) and `params.bin` (all parameters as
//! little-endian f32 in flattening order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Net};

pub const CHECKPOINT_FORMAT: &str = "ohda-checkpoint-v1";
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    Dropout { rate: f64 },
    GradReverse { lambda: f64 },
}

impl LayerSpec {
    pub fn of(layer: &Layer) -> LayerSpec {
        match layer {
            Layer::Dense { weight, .. } => LayerSpec::Dense {
                in_dim: weight.cols(),
                out_dim: weight.rows(),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
            Layer::GradReverse { lambda } => LayerSpec::GradReverse { lambda: *lambda },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn of(name: &str, net: &Net) -> NetSpec {
        NetSpec {
            name: name.to_string(),
            layers: net.layers().iter().map(LayerSpec::of).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub param_count: usize,
    pub seed: u64,
    pub step: u64,
    pub nets: Vec<NetSpec>,
    /// Model-specific payload (config echo, class size priors, ...).
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, manifest: &Manifest, params: &[f64]) -> Result<()> {
    if manifest.param_count != params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest declares {} parameters, buffer holds {}",
            manifest.param_count,
            params.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let mut blob = Vec::with_capacity(params.len() * 4);
    for &p in params {
        blob.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, blob).map_err(|e| Error::io(&params_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, Vec<f64>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if blob.len() != manifest.param_count * 4 {
        return Err(Error::Checkpoint(format!(
            "parameter blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.param_count * 4
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, tag};

    fn sample_manifest(param_count: usize) -> Manifest {
        let mut init = rng::stream(5, &[tag::INIT]);
        let net = Net::new(vec![
            Layer::dense_xavier(3, 4, &mut init),
            Layer::Relu,
            Layer::Dropout { rate: 0.3 },
            Layer::GradReverse { lambda: 0.2 },
        ]);
        Manifest {
            format: CHECKPOINT_FORMAT.into(),
            param_count,
            seed: 17,
            step: 42,
            nets: vec![NetSpec::of("probe", &net)],
            extra: serde_json::json!({"note": "test"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        let params: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();

        save_checkpoint(&first, &sample_manifest(16), &params).unwrap();
        let (manifest, reloaded) = load_checkpoint(&first).unwrap();
        save_checkpoint(&second, &manifest, &reloaded).unwrap();

        for file in [MANIFEST_FILE, PARAMS_FILE] {
            let a = std::fs::read(first.join(file)).unwrap();
            let b = std::fs::read(second.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs after a round trip");
        }
    }

    #[test]
    fn loaded_params_match_f32_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let params = vec![0.1, -2.5, 1.0 / 3.0];
        save_checkpoint(dir.path(), &sample_manifest(3), &params).unwrap();
        let (_, reloaded) = load_checkpoint(dir.path()).unwrap();
        for (orig, got) in params.iter().zip(&reloaded) {
            assert_eq!(*got, *orig as f32 as f64);
        }
    }

    #[test]
    fn count_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(dir.path(), &sample_manifest(5), &[0.0; 4]).is_err());

        save_checkpoint(dir.path(), &sample_manifest(4), &[0.0; 4]).unwrap();
        let blob = dir.path().join(PARAMS_FILE);
        std::fs::write(&blob, [0u8; 12]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn foreign_formats_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = sample_manifest(1);
        manifest.format = "something-else".into();
        save_checkpoint(dir.path(), &manifest, &[1.0]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn layer_specs_mirror_layers() {
        let manifest = sample_manifest(0);
        assert_eq!(
            manifest.nets[0].layers,
            vec![
                LayerSpec::Dense { in_dim: 3, out_dim: 4 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::GradReverse { lambda: 0.2 },
            ]
        );
    }
}
