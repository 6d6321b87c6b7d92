//! Named-tensor checkpoints tagged with the architecture hash of their config.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use rtatl_core::Config;

use crate::error::{Error, Result};
use crate::model::Rtatl;

const HASH_KEY: &str = "config_hash";
const CONFIG_KEY: &str = "config";

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(model: &Rtatl, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let state = model.state()?;
    let metadata: HashMap<String, String> = [
        (HASH_KEY.to_string(), model.config().architecture_hash()),
        (CONFIG_KEY.to_string(), model.config().serialize()),
    ]
    .into();
    safetensors::serialize_to_file(state.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata), path)
        .map_err(|e| ck_err(path, e.to_string()))
}

fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
    meta.metadata()
        .clone()
        .ok_or_else(|| ck_err(path, "no metadata"))
}

/// Config stored inside a checkpoint.
pub fn checkpoint_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let meta = read_metadata(path)?;
    let text = meta.get(CONFIG_KEY).ok_or_else(|| ck_err(path, "no embedded config"))?;
    Ok(Config::parse(text)?)
}

/// Loads weights into `model`, refusing checkpoints built for another architecture or AU set.
pub fn load_into(model: &Rtatl, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = read_metadata(path)?;
    let found = meta.get(HASH_KEY).cloned().unwrap_or_default();
    let expected = model.config().architecture_hash();
    if found != expected {
        return Err(Error::HashMismatch { found, expected });
    }
    let tensors = candle_core::safetensors::load(path, model.device())?;
    model.load_state(&tensors, true)?;
    Ok(())
}

/// Rebuilds a model from the config embedded in the checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Rtatl> {
    let cfg = checkpoint_config(&path)?;
    let model = Rtatl::new(&cfg, dtype, device, 0)?;
    load_into(&model, path)?;
    Ok(model)
}

/// Copies matching trunk tensors from a safetensors file, for pretrained initialization.
pub fn load_trunk(model: &Rtatl, path: impl AsRef<Path>) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path.as_ref(), model.device())?;
    let trunk: HashMap<_, _> = tensors
        .into_iter()
        .filter(|(k, _)| k.starts_with("backbone.trunk."))
        .collect();
    model.load_state(&trunk, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    #[test]
    fn round_trip_and_hash_guard() {
        let cfg = Config::preset("synthetic").unwrap();
        let a = Rtatl::new(&cfg, DType::F32, &Device::Cpu, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_checkpoint(&a, &path).unwrap();
        assert_eq!(checkpoint_config(&path).unwrap(), cfg);
        let b = load_checkpoint(&path, DType::F32, &Device::Cpu).unwrap();
        let (sa, sb) = (a.state().unwrap(), b.state().unwrap());
        assert_eq!(sa.len(), sb.len());
        for (k, t) in &sa {
            let d = (t - &sb[k]).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
        let mut other = cfg.clone();
        other.au.au_ids[0] = 2;
        let c = Rtatl::new(&other, DType::F32, &Device::Cpu, 1).unwrap();
        assert!(matches!(load_into(&c, &path), Err(Error::HashMismatch { .. })));
        let n = load_trunk(&c, &path).unwrap();
        assert!(n > 0);
        let _ = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
    }
}
