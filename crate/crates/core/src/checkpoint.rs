//! Named f64 tensor archives in the safetensors format with one JSON
//! manifest string as metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

const MANIFEST_KEY: &str = "manifest";

/// Serializes `tensors` (any order) plus `manifest` to bytes. Equal inputs give equal bytes.
pub fn to_bytes(tensors: &[(String, &ArrayD<f64>)], manifest: &str) -> Result<Vec<u8>> {
    let buffers: BTreeMap<&str, (Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, a)| {
            let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.as_str(), (a.shape().to_vec(), bytes))
        })
        .collect();
    if buffers.len() != tensors.len() {
        return Err(Error::Config("duplicate tensor names in checkpoint".into()));
    }
    let views = buffers
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(Dtype::F64, shape.clone(), bytes).map(|v| (name.to_string(), v)).map_err(|e| Error::Config(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = Some(HashMap::from([(MANIFEST_KEY.to_string(), manifest.to_string())]));
    safetensors::serialize(views, &meta).map_err(|e| Error::Config(e.to_string()))
}

pub fn save(path: &Path, tensors: &[(String, &ArrayD<f64>)], manifest: &str) -> Result<()> {
    let bytes = to_bytes(tensors, manifest)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tensors by name and the manifest string.
pub fn load(path: &Path) -> Result<(HashMap<String, ArrayD<f64>>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
    let manifest = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .cloned()
        .ok_or_else(|| Error::format(path, "checkpoint has no manifest"))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::format(path, format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let vals: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), vals).map_err(|e| Error::format(path, e))?;
        out.insert(name, arr);
    }
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trips_bitwise() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap();
        let b = ArrayD::from_elem(IxDyn(&[4]), 0.1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        save(&p, &[("b".into(), &b), ("a".into(), &a)], "{\"k\":1}").unwrap();
        let (t, m) = load(&p).unwrap();
        assert_eq!(m, "{\"k\":1}");
        assert_eq!(t["a"].iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        // order of the input list does not matter
        let again = to_bytes(&[("a".into(), &t["a"]), ("b".into(), &t["b"])], &m).unwrap();
        assert_eq!(again, fs::read(&p).unwrap());
    }
}
