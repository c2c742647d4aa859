//! Raw fixture format: a little-endian uint8 binary blob plus a JSON sidecar
//! describing shape, axis order, and the label map used when writing.
//!
//! The sidecar lives next to the blob as `<name>.json` (appended to the full
//! file name, e.g. `vol.raw` → `vol.raw.json`).  Axis order `"xyz"` means the
//! blob is laid out row-major with the first axis slowest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::RemapTable;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub axis_order: String,
    /// Map from stored value to canonical label, keys serialized as strings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, u8>>,
}

impl RawSidecar {
    pub fn remap_table(&self) -> Result<Option<RemapTable>> {
        match &self.labels {
            None => Ok(None),
            Some(map) => {
                let mut table = BTreeMap::new();
                for (k, &v) in map {
                    let raw: i64 = k.parse().map_err(|_| {
                        Error::InvalidConfig(format!("sidecar label key {k:?} is not an integer"))
                    })?;
                    table.insert(raw, v);
                }
                Ok(Some(RemapTable::new(table)?))
            }
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Write a raw fixture volume (values stored as-is, C order) and its sidecar.
pub fn write_raw(path: &Path, values: &Array3<u8>, labels: Option<&RemapTable>) -> Result<()> {
    let standard = values.as_standard_layout();
    let bytes = standard.as_slice().expect("standard layout has a slice");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let s = values.shape();
    let sidecar = RawSidecar {
        shape: [s[0], s[1], s[2]],
        axis_order: "xyz".into(),
        labels: labels.map(|t| {
            t.entries()
                .iter()
                .map(|(&k, &v)| (k.to_string(), v))
                .collect()
        }),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    let sc_path = sidecar_path(path);
    fs::write(&sc_path, json).map_err(|e| Error::io(&sc_path, e))?;
    Ok(())
}

/// Read a raw fixture volume; returns stored values (unremapped) and the
/// parsed sidecar.
pub fn read_raw(path: &Path) -> Result<(Array3<i64>, RawSidecar)> {
    let sc_path = sidecar_path(path);
    let sc_text = fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&sc_text).map_err(|e| Error::MalformedVolume {
        path: sc_path.clone(),
        reason: format!("bad sidecar: {e}"),
    })?;
    if sidecar.axis_order != "xyz" {
        return Err(Error::MalformedVolume {
            path: sc_path,
            reason: format!("unsupported axis order {:?}", sidecar.axis_order),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [d1, d2, d3] = sidecar.shape;
    let expected = d1 * d2 * d3;
    if bytes.len() != expected {
        return Err(Error::MalformedVolume {
            path: path.to_path_buf(),
            reason: format!("blob holds {} bytes, shape needs {}", bytes.len(), expected),
        });
    }
    let values = Array3::from_shape_vec((d1, d2, d3), bytes.iter().map(|&b| b as i64).collect())
        .expect("length checked above");
    Ok((values, sidecar))
}
