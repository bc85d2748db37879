//! Raw little-endian `f64` arrays with a `<file>.json` sidecar `{"shape": [...]}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{json_parse_error, Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string(&Sidecar { shape: t.shape().to_vec() }).expect("shape serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| json_parse_error(&text, &e))?;
    let expected: usize = sidecar.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::validation(format!(
            "{}: {} bytes but shape {:?} needs {expected}",
            path.display(),
            bytes.len(),
            sidecar.shape
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(sidecar.shape, data)
}
