//! Trained parameters as a flat little-endian `f64` file plus a TOML
//! manifest naming every tensor's shape and offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserShape, LayoutPrior, TensorInfo, ToyDenoiser};
use crate::diffusion::Conditioning;
use crate::error::{Result, ToyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterManifest {
    pub dtype: String,
    pub endianness: String,
    pub count: usize,
    pub conditioning: Conditioning,
    pub shape: DenoiserShape,
    pub layout: Option<LayoutPrior>,
    pub tensors: Vec<TensorInfo>,
}

pub fn manifest_for(model: &ToyDenoiser) -> ParameterManifest {
    ParameterManifest {
        dtype: "f64".into(),
        endianness: "little".into(),
        count: model.parameter_count(),
        conditioning: model.conditioning,
        shape: model.shape,
        layout: model.layout_prior().cloned(),
        tensors: model.layout(),
    }
}

pub fn encode_parameters(model: &ToyDenoiser) -> Vec<u8> {
    model.parameters().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// The parameter manifest as TOML text.
pub fn encode_manifest(model: &ToyDenoiser) -> Result<String> {
    Ok(toml::to_string(&manifest_for(model))?)
}

/// Writes `<stem>.bin` and `<stem>.toml` next to each other.
pub fn save_parameters(model: &ToyDenoiser, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.bin")), encode_parameters(model))?;
    fs::write(dir.join(format!("{stem}.toml")), encode_manifest(model)?)?;
    Ok(())
}

pub fn load_parameters(dir: &Path, stem: &str) -> Result<ToyDenoiser> {
    let manifest: ParameterManifest = toml::from_str(&fs::read_to_string(dir.join(format!("{stem}.toml")))?)?;
    if manifest.dtype != "f64" || manifest.endianness != "little" {
        return Err(ToyError::Format(format!("unsupported encoding {} / {}", manifest.dtype, manifest.endianness)));
    }
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    if bytes.len() != manifest.count * 8 {
        return Err(ToyError::Format(format!("{} bytes for {} parameters", bytes.len(), manifest.count)));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight"))).collect();
    let mut model = ToyDenoiser::from_parameters(manifest.shape, manifest.conditioning, params)?;
    if let Some(prior) = manifest.layout.clone() {
        model = model.with_layout(prior)?;
    }
    if model.layout() != manifest.tensors {
        return Err(ToyError::Format("tensor table does not match the declared shape".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = crate::scene::SceneSpec::two_concept(8);
        let prior = LayoutPrior { strength: 2.0, regions: scene.concepts.iter().map(|c| c.region).collect() };
        let m = ToyDenoiser::new(DenoiserShape::new(8, 2, 3, 8), Conditioning::Interpolated, 4)
            .unwrap()
            .with_layout(prior)
            .unwrap();
        save_parameters(&m, dir.path(), "params").unwrap();
        let back = load_parameters(dir.path(), "params").unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(dir.path().join("params.toml")).unwrap();
        assert!(text.contains("endianness = \"little\""));
        assert!(text.contains("local.keys"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyDenoiser::new(DenoiserShape::new(8, 2, 3, 8), Conditioning::GlobalOnly, 4).unwrap();
        save_parameters(&m, dir.path(), "p").unwrap();
        let bin = dir.path().join("p.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_parameters(dir.path(), "p"), Err(ToyError::Format(_))));
    }
}
