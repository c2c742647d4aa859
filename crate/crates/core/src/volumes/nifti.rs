//! Minimal NIfTI-1 reader/writer for label volumes.
//!
//! Supports single-file little-endian `.nii` / `.nii.gz` with uint8 or int16
//! data, no scaling, x varying fastest.  This covers segmentation masks as
//! distributed by the BraTS challenge; anything fancier is rejected.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedVolume {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn i16_at(bytes: &[u8], offset: usize) -> i16 {
    i16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn i32_at(bytes: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Read a NIfTI-1 label volume; returns stored values without remapping.
pub fn read_nifti(path: &Path) -> Result<Array3<i64>> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(path, "file shorter than NIfTI-1 header"));
    }
    let sizeof_hdr = i32_at(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(malformed(
            path,
            format!("sizeof_hdr = {sizeof_hdr}; only little-endian NIfTI-1 is supported"),
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(malformed(path, "magic is not \"n+1\" (single-file NIfTI-1)"));
    }
    let ndim = i16_at(&bytes, 40);
    if !(3..=7).contains(&ndim) {
        return Err(malformed(path, format!("dim[0] = {ndim}, expected 3..=7")));
    }
    let mut dims = [1usize; 7];
    for (i, dim) in dims.iter_mut().enumerate() {
        let d = i16_at(&bytes, 40 + 2 * (i + 1));
        if i < ndim as usize {
            if d <= 0 {
                return Err(malformed(path, format!("non-positive dim[{}] = {d}", i + 1)));
            }
            *dim = d as usize;
        }
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(malformed(path, "volumes with a 4th dimension are not supported"));
    }
    let datatype = i16_at(&bytes, 70);
    let bytes_per = match datatype {
        DT_UINT8 => 1usize,
        DT_INT16 => 2usize,
        other => {
            return Err(malformed(
                path,
                format!("datatype {other} unsupported (expected uint8 or int16)"),
            ))
        }
    };
    let slope = f32_at(&bytes, 112);
    let inter = f32_at(&bytes, 116);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(malformed(
            path,
            format!("scaled data (slope {slope}, inter {inter}) is not a label volume"),
        ));
    }
    let vox_offset = f32_at(&bytes, 108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(malformed(path, format!("bad vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let (d1, d2, d3) = (dims[0], dims[1], dims[2]);
    let n = d1 * d2 * d3;
    if bytes.len() < offset + n * bytes_per {
        return Err(malformed(path, "data section truncated"));
    }
    let data = &bytes[offset..offset + n * bytes_per];
    // NIfTI stores x fastest: linear index i + d1*(j + d2*k).
    let values = Array3::from_shape_fn((d1, d2, d3), |(i, j, k)| {
        let idx = i + d1 * (j + d2 * k);
        match datatype {
            DT_UINT8 => data[idx] as i64,
            _ => i16::from_le_bytes([data[2 * idx], data[2 * idx + 1]]) as i64,
        }
    });
    Ok(values)
}

/// Write a uint8 label volume as single-file NIfTI-1 (gzipped iff the path
/// ends in `.gz`).
pub fn write_nifti(path: &Path, values: &Array3<u8>) -> Result<()> {
    let s = values.shape();
    let mut header = vec![0u8; 352]; // header + 4 extension bytes
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, s[0] as i16, s[1] as i16, s[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&DT_UINT8.to_le_bytes());
    header[72..74].copy_from_slice(&8i16.to_le_bytes()); // bitpix
    for i in 0..8 {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim
    }
    header[108..112].copy_from_slice(&352.0f32.to_le_bytes()); // vox_offset
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    header[344..348].copy_from_slice(b"n+1\0");

    let n = s[0] * s[1] * s[2];
    let mut data = Vec::with_capacity(n);
    // x fastest on disk: iterate the reversed view in standard order.
    for &v in values.view().reversed_axes().iter() {
        data.push(v);
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&header).map_err(|e| Error::io(path, e))?;
        enc.write_all(&data).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(&header).map_err(|e| Error::io(path, e))?;
        file.write_all(&data).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
