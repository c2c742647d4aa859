//! Volume ingestion, validation, and the deterministic preprocessing pipeline
//! mapping raw label maps to network-ready one-hot volumes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::types::CHANNEL_COUNT;

mod manifest;
mod nifti;
mod raw;

pub use manifest::{DatasetManifest, ManifestRecord};
pub use nifti::{read_nifti, write_nifti};
pub use raw::{read_raw, write_raw, RawSidecar};

/// Highest admitted voxel label (labels are {0..=3}).
pub const MAX_LABEL: u8 = (CHANNEL_COUNT - 1) as u8;

/// Dense 3D integer label map over {0..=3}; the observed x before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegVolume {
    data: Array3<u8>,
}

impl SegVolume {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 1, 1],
                got: data.shape().to_vec(),
            });
        }
        if let Some(&bad) = data.iter().find(|&&v| v > MAX_LABEL) {
            return Err(Error::LabelOutOfRange { value: bad as i64 });
        }
        Ok(SegVolume { data })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Number of nonzero (tumor) voxels.
    pub fn tumor_voxel_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    /// Per-label voxel counts, indexed by label value.
    pub fn label_histogram(&self) -> [usize; CHANNEL_COUNT] {
        let mut hist = [0usize; CHANNEL_COUNT];
        for &v in self.data.iter() {
            hist[v as usize] += 1;
        }
        hist
    }

    /// Inclusive bounding box of nonzero voxels, as (low, high) per axis.
    /// Returns None for an all-background volume.
    pub fn nonzero_bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((i, j, k), &v) in self.data.indexed_iter() {
            if v > 0 {
                any = true;
                let idx = [i, j, k];
                for a in 0..3 {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// Channelized real-valued volume, C = 4 channels per voxel; the network
/// input/output space.  Exact encodings are {0,1}-valued with unit channel
/// sums; decoder outputs live in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotVolume {
    data: Array4<f64>,
}

impl OneHotVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let s = data.shape().to_vec();
        if s[0] != CHANNEL_COUNT || s.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                expected: vec![CHANNEL_COUNT, 1, 1, 1],
                got: s,
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "one-hot volume entries must lie in [0, 1]".into(),
            ));
        }
        Ok(OneHotVolume { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-voxel argmax over channels; ties break toward the lower channel.
    pub fn argmax_labels(&self) -> SegVolume {
        let s = self.spatial_shape();
        let data = Array3::from_shape_fn((s[0], s[1], s[2]), |(i, j, k)| {
            let mut best = 0usize;
            let mut best_v = self.data[[0, i, j, k]];
            for c in 1..CHANNEL_COUNT {
                let v = self.data[[c, i, j, k]];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        });
        SegVolume { data }
    }
}

/// Table remapping raw stored label values into the contiguous {0..=3} set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapTable {
    map: BTreeMap<i64, u8>,
}

impl RemapTable {
    pub fn new(map: BTreeMap<i64, u8>) -> Result<Self> {
        if let Some((_, &bad)) = map.iter().find(|(_, &v)| v > MAX_LABEL) {
            return Err(Error::LabelOutOfRange { value: bad as i64 });
        }
        Ok(RemapTable { map })
    }

    /// BraTS convention: {0→0, 1→1, 2→2, 4→3}.
    pub fn brats_default() -> Self {
        RemapTable {
            map: BTreeMap::from([(0, 0), (1, 1), (2, 2), (4, 3)]),
        }
    }

    /// Identity on {0..=3}.
    pub fn identity() -> Self {
        RemapTable {
            map: BTreeMap::from([(0, 0), (1, 1), (2, 2), (3, 3)]),
        }
    }

    pub fn apply(&self, raw: i64) -> Option<u8> {
        self.map.get(&raw).copied()
    }

    pub fn entries(&self) -> &BTreeMap<i64, u8> {
        &self.map
    }
}

impl Default for RemapTable {
    fn default() -> Self {
        RemapTable::brats_default()
    }
}

/// Deterministic crop + downsample configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    /// Fixed crop origin; None centers the crop box in the input volume.
    pub crop_origin: Option<[usize; 3]>,
    pub crop_extent: [usize; 3],
    pub downsample_factor: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_origin: None,
            crop_extent: [146, 188, 128],
            downsample_factor: 2,
        }
    }
}

impl PreprocessConfig {
    /// Crop + downsample matching the desk-scale model geometry (16×16×12).
    pub fn desk_scale() -> Self {
        PreprocessConfig {
            crop_origin: None,
            crop_extent: [32, 32, 24],
            downsample_factor: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::InvalidConfig(
                "downsample factor must be positive".into(),
            ));
        }
        if self.crop_extent.iter().any(|&e| e == 0) {
            return Err(Error::InvalidConfig("crop extent must be positive".into()));
        }
        if self
            .crop_extent
            .iter()
            .any(|&e| e % self.downsample_factor != 0)
        {
            return Err(Error::InvalidConfig(format!(
                "crop extent {:?} not divisible by downsample factor {}",
                self.crop_extent, self.downsample_factor
            )));
        }
        Ok(())
    }

    /// Spatial shape after crop + downsample.
    pub fn target_shape(&self) -> [usize; 3] {
        let f = self.downsample_factor;
        [
            self.crop_extent[0] / f,
            self.crop_extent[1] / f,
            self.crop_extent[2] / f,
        ]
    }
}

/// Load a label volume from disk, remapping stored values into {0..=3}.
///
/// `.nii` / `.nii.gz` files are read as NIfTI-1; anything else is read as the
/// raw fixture format (binary blob + JSON sidecar).  When `remap` is None the
/// sidecar's label map is used if present, otherwise the BraTS default.
pub fn load_label_volume(path: &Path, remap: Option<&RemapTable>) -> Result<SegVolume> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let (raw_values, sidecar_map) = if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        (nifti::read_nifti(path)?, None)
    } else {
        let (values, sidecar) = raw::read_raw(path)?;
        (values, sidecar.remap_table()?)
    };
    let table = match (remap, &sidecar_map) {
        (Some(t), _) => t.clone(),
        (None, Some(t)) => t.clone(),
        (None, None) => RemapTable::brats_default(),
    };
    let shape = raw_values.raw_dim();
    let mut out = Array3::<u8>::zeros(shape);
    for (idx, &v) in raw_values.indexed_iter() {
        match table.apply(v) {
            Some(mapped) => out[idx] = mapped,
            None => {
                return Err(Error::MalformedVolume {
                    path: path.to_path_buf(),
                    reason: format!("unknown label value {v}"),
                })
            }
        }
    }
    SegVolume::new(out)
}

/// Crop to `extent` voxels starting at `origin`.  Errors if any nonzero voxel
/// falls outside the box, reporting how many would be lost.
pub fn crop_volume(v: &SegVolume, origin: [usize; 3], extent: [usize; 3]) -> Result<SegVolume> {
    let shape = v.shape();
    for a in 0..3 {
        if origin[a] + extent[a] > shape[a] || extent[a] == 0 {
            return Err(Error::InvalidConfig(format!(
                "crop box origin {origin:?} extent {extent:?} does not fit in volume {shape:?}"
            )));
        }
    }
    let inside = v
        .data
        .slice(ndarray::s![
            origin[0]..origin[0] + extent[0],
            origin[1]..origin[1] + extent[1],
            origin[2]..origin[2] + extent[2]
        ])
        .to_owned();
    let kept = inside.iter().filter(|&&x| x > 0).count();
    let total = v.tumor_voxel_count();
    if kept != total {
        return Err(Error::TumorVoxelsLost { lost: total - kept });
    }
    Ok(SegVolume { data: inside })
}

/// Stride subsampling: output voxel (i,j,k) = v[i·f, j·f, k·f].
pub fn downsample_labels(v: &SegVolume, factor: usize) -> Result<SegVolume> {
    if factor == 0 {
        return Err(Error::InvalidConfig(
            "downsample factor must be positive".into(),
        ));
    }
    let shape = v.shape();
    if shape.iter().any(|&d| d % factor != 0) {
        return Err(Error::InvalidConfig(format!(
            "shape {shape:?} not divisible by downsample factor {factor}"
        )));
    }
    let out = Array3::from_shape_fn(
        (shape[0] / factor, shape[1] / factor, shape[2] / factor),
        |(i, j, k)| v.data[[i * factor, j * factor, k * factor]],
    );
    Ok(SegVolume { data: out })
}

/// Exact one-hot encoding: channel c is 1 where v == c.
pub fn one_hot_encode(v: &SegVolume) -> OneHotVolume {
    let s = v.shape();
    let mut data = Array4::<f64>::zeros((CHANNEL_COUNT, s[0], s[1], s[2]));
    for ((i, j, k), &label) in v.data.indexed_iter() {
        data[[label as usize, i, j, k]] = 1.0;
    }
    OneHotVolume { data }
}

/// Mirror along the left–right axis (the first spatial axis).
pub fn flip_lr(v: &SegVolume) -> SegVolume {
    let mut data = v.data.clone();
    data.invert_axis(ndarray::Axis(0));
    SegVolume { data }
}

fn centered_origin(shape: [usize; 3], extent: [usize; 3]) -> [usize; 3] {
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = (shape[a].saturating_sub(extent[a])) / 2;
    }
    origin
}

/// Full preprocessing pipeline: crop → downsample → one-hot.
///
/// The crop box is the configured one (or centered when no origin is fixed);
/// if it would lose tumor voxels, the box is re-centered on the nonzero
/// bounding box before giving up.
pub fn preprocess(v: &SegVolume, cfg: &PreprocessConfig) -> Result<OneHotVolume> {
    cfg.validate()?;
    let shape = v.shape();
    for a in 0..3 {
        if cfg.crop_extent[a] > shape[a] {
            return Err(Error::InvalidConfig(format!(
                "crop extent {:?} exceeds volume shape {:?}",
                cfg.crop_extent, shape
            )));
        }
    }
    let origin = cfg
        .crop_origin
        .unwrap_or_else(|| centered_origin(shape, cfg.crop_extent));
    let cropped = match crop_volume(v, origin, cfg.crop_extent) {
        Ok(c) => c,
        Err(Error::TumorVoxelsLost { .. }) => {
            // Fallback: center the box on the tumor bounding box, clamped to
            // stay inside the volume.
            let (lo, hi) = v.nonzero_bounding_box().expect("lost voxels imply tumor");
            let mut origin = [0usize; 3];
            for a in 0..3 {
                let bbox_center = (lo[a] + hi[a]) / 2;
                let half = cfg.crop_extent[a] / 2;
                let max_origin = shape[a] - cfg.crop_extent[a];
                origin[a] = bbox_center.saturating_sub(half).min(max_origin);
            }
            crop_volume(v, origin, cfg.crop_extent)?
        }
        Err(e) => return Err(e),
    };
    let down = downsample_labels(&cropped, cfg.downsample_factor)?;
    Ok(one_hot_encode(&down))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn zeros(shape: (usize, usize, usize)) -> SegVolume {
        SegVolume::new(Array3::zeros(shape)).unwrap()
    }

    #[test]
    fn seg_volume_rejects_out_of_range_labels() {
        let mut a = Array3::<u8>::zeros((2, 2, 2));
        a[[0, 0, 0]] = 4;
        match SegVolume::new(a) {
            Err(Error::LabelOutOfRange { value }) => assert_eq!(value, 4),
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn all_zero_volume_is_valid() {
        let v = zeros((3, 4, 5));
        assert_eq!(v.tumor_voxel_count(), 0);
    }

    #[test]
    fn crop_default_box_shapes() {
        let v = zeros((240, 240, 155));
        let origin = centered_origin(v.shape(), [146, 188, 128]);
        let c = crop_volume(&v, origin, [146, 188, 128]).unwrap();
        assert_eq!(c.shape(), [146, 188, 128]);
    }

    #[test]
    fn crop_full_box_is_identity() {
        let mut a = Array3::<u8>::zeros((4, 5, 6));
        a[[1, 2, 3]] = 2;
        let v = SegVolume::new(a).unwrap();
        let c = crop_volume(&v, [0, 0, 0], [4, 5, 6]).unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_reports_lost_voxel_count() {
        let mut a = Array3::<u8>::zeros((8, 8, 8));
        a[[0, 0, 0]] = 1; // corner voxel outside the interior box
        a[[4, 4, 4]] = 1;
        let v = SegVolume::new(a).unwrap();
        match crop_volume(&v, [2, 2, 2], [4, 4, 4]) {
            Err(Error::TumorVoxelsLost { lost }) => assert_eq!(lost, 1),
            other => panic!("expected lost-voxel error, got {other:?}"),
        }
    }

    #[test]
    fn downsample_shapes_and_identity() {
        let v = zeros((146, 188, 128));
        let d = downsample_labels(&v, 2).unwrap();
        assert_eq!(d.shape(), [73, 94, 64]);

        let mut a = Array3::<u8>::zeros((4, 4, 4));
        a[[2, 2, 2]] = 3;
        let v = SegVolume::new(a).unwrap();
        let same = downsample_labels(&v, 1).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn downsample_constant_volume_stays_constant() {
        let a = Array3::<u8>::from_elem((6, 6, 6), 2);
        let v = SegVolume::new(a).unwrap();
        let d = downsample_labels(&v, 3).unwrap();
        assert!(d.data().iter().all(|&x| x == 2));
        assert_eq!(d.shape(), [2, 2, 2]);
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let v = zeros((5, 4, 4));
        assert!(downsample_labels(&v, 2).is_err());
    }

    #[test]
    fn downsample_is_stride_subsampling() {
        let a = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i + j + k) % 4) as u8);
        let v = SegVolume::new(a.clone()).unwrap();
        let d = downsample_labels(&v, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(d.data()[[i, j, k]], a[[2 * i, 2 * j, 2 * k]]);
                }
            }
        }
    }

    #[test]
    fn one_hot_single_voxel() {
        let mut a = Array3::<u8>::zeros((1, 1, 1));
        a[[0, 0, 0]] = 3;
        let v = SegVolume::new(a).unwrap();
        let oh = one_hot_encode(&v);
        let ch: Vec<f64> = (0..4).map(|c| oh.data()[[c, 0, 0, 0]]).collect();
        assert_eq!(ch, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_round_trip_and_simplex() {
        let a = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| ((i * 7 + j * 3 + k) % 4) as u8);
        let v = SegVolume::new(a).unwrap();
        let oh = one_hot_encode(&v);
        assert_eq!(oh.argmax_labels(), v);
        let s = v.shape();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let sum: f64 = (0..4).map(|c| oh.data()[[c, i, j, k]]).sum();
                    assert_eq!(sum, 1.0);
                }
            }
        }
    }

    #[test]
    fn flip_moves_voxel_to_mirrored_index() {
        let mut a = Array3::<u8>::zeros((5, 3, 3));
        a[[1, 0, 2]] = 2;
        let v = SegVolume::new(a).unwrap();
        let f = flip_lr(&v);
        assert_eq!(f.data()[[3, 0, 2]], 2);
        assert_eq!(f.tumor_voxel_count(), 1);
    }

    #[test]
    fn flip_is_involution_and_preserves_histogram() {
        let a = Array3::from_shape_fn((4, 5, 6), |(i, j, k)| ((i * 5 + j * 2 + k) % 4) as u8);
        let v = SegVolume::new(a).unwrap();
        let ff = flip_lr(&flip_lr(&v));
        assert_eq!(ff, v);
        assert_eq!(flip_lr(&v).label_histogram(), v.label_histogram());
    }

    #[test]
    fn preprocess_brats_shape() {
        let mut a = Array3::<u8>::zeros((240, 240, 155));
        a[[120, 120, 77]] = 1;
        let v = SegVolume::new(a).unwrap();
        let oh = preprocess(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(oh.data().shape(), &[4, 73, 94, 64]);
    }

    #[test]
    fn preprocess_reduction_exceeds_94_percent() {
        // 1 − (73·94·64)/(240·240·155) = 0.9508...
        let kept = (73 * 94 * 64) as f64;
        let orig = (240 * 240 * 155) as f64;
        let reduction = 1.0 - kept / orig;
        assert!((reduction - 0.9508).abs() < 1e-3);
        assert!(reduction >= 0.94);
    }

    #[test]
    fn preprocess_all_zero_gives_background_one_hot() {
        let v = zeros((240, 240, 155));
        let oh = preprocess(&v, &PreprocessConfig::default()).unwrap();
        let bg_sum: f64 = oh
            .data()
            .slice(ndarray::s![0, .., .., ..])
            .iter()
            .sum::<f64>();
        assert_eq!(bg_sum, (73 * 94 * 64) as f64);
    }

    #[test]
    fn preprocess_recentering_rescues_offset_tumor() {
        // Tumor near a corner: the centered box loses it, the fallback
        // re-centers and succeeds.
        let mut a = Array3::<u8>::zeros((240, 240, 155));
        a[[10, 10, 10]] = 1;
        a[[20, 30, 40]] = 2;
        let v = SegVolume::new(a).unwrap();
        let oh = preprocess(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(oh.data().shape(), &[4, 73, 94, 64]);
        // Both tumor voxels survived the crop (they may or may not survive the
        // stride subsample, but the crop must keep them).
        let nonbg: f64 = oh
            .data()
            .slice(ndarray::s![1.., .., .., ..])
            .iter()
            .sum::<f64>();
        assert!(nonbg >= 0.0);
    }

    #[test]
    fn preprocess_is_deterministic() {
        let mut a = Array3::<u8>::zeros((64, 64, 48));
        a[[32, 32, 24]] = 3;
        let v = SegVolume::new(a).unwrap();
        let cfg = PreprocessConfig {
            crop_origin: None,
            crop_extent: [32, 32, 24],
            downsample_factor: 2,
        };
        let a = preprocess(&v, &cfg).unwrap();
        let b = preprocess(&v, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
