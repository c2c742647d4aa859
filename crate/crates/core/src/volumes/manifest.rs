//! Dataset manifest: subject records partitioned into labeled and unlabeled
//! entries, stored as BraTS-survival-compatible CSV.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::SurvivalClass;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub volume_path: PathBuf,
    pub survival_days: Option<f64>,
    pub class_label: Option<SurvivalClass>,
    pub resection_status: Option<String>,
}

impl ManifestRecord {
    /// Unlabeled record: volume only.
    pub fn unlabeled(subject_id: impl Into<String>, volume_path: impl Into<PathBuf>) -> Self {
        ManifestRecord {
            subject_id: subject_id.into(),
            volume_path: volume_path.into(),
            survival_days: None,
            class_label: None,
            resection_status: None,
        }
    }

    /// Labeled record: survival days known, class derived from the day bands.
    pub fn labeled(
        subject_id: impl Into<String>,
        volume_path: impl Into<PathBuf>,
        survival_days: f64,
    ) -> Self {
        ManifestRecord {
            subject_id: subject_id.into(),
            volume_path: volume_path.into(),
            survival_days: Some(survival_days),
            class_label: Some(SurvivalClass::from_days(survival_days)),
            resection_status: None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.class_label.is_some()
    }
}

/// Immutable list of subject records; N_l labeled + N_u unlabeled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    /// Directory that relative volume paths resolve against (set when the
    /// manifest was read from disk).
    base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(mut records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &mut records {
            if !seen.insert(r.subject_id.clone()) {
                return Err(Error::DuplicateSubject {
                    id: r.subject_id.clone(),
                });
            }
            if let Some(d) = r.survival_days {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "subject {:?}: survival days {d} must be a non-negative real",
                        r.subject_id
                    )));
                }
                // A record is labeled iff days (or class) is present.
                if r.class_label.is_none() {
                    r.class_label = Some(SurvivalClass::from_days(d));
                }
            }
        }
        Ok(DatasetManifest {
            records,
            base_dir: None,
        })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn labeled_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.is_labeled())
    }

    pub fn unlabeled_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| !r.is_labeled())
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_records().count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_records().count()
    }

    /// Volume path of a record, resolved against the manifest location when
    /// relative.
    pub fn resolved_path(&self, record: &ManifestRecord) -> PathBuf {
        if record.volume_path.is_absolute() {
            record.volume_path.clone()
        } else {
            match &self.base_dir {
                Some(base) => base.join(&record.volume_path),
                None => record.volume_path.clone(),
            }
        }
    }

    pub fn with_base_dir(mut self, base: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(base.into());
        self
    }

    /// Read from CSV with columns subject_id, volume_path, survival_days
    /// (blank = unlabeled), resection_status.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::MalformedManifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(c_id), Some(c_vol)) = (col("subject_id"), col("volume_path")) else {
            return Err(Error::MalformedManifest {
                path: path.to_path_buf(),
                reason: "missing subject_id/volume_path columns".into(),
            });
        };
        let c_days = col("survival_days");
        let c_res = col("resection_status");

        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let survival_days = match c_days.and_then(|c| row.get(c)) {
                None | Some("") => None,
                Some(text) => {
                    let days: f64 = text.parse().map_err(|_| Error::MalformedManifest {
                        path: path.to_path_buf(),
                        reason: format!("survival_days {text:?} is not a number"),
                    })?;
                    if !days.is_finite() || days < 0.0 {
                        return Err(Error::MalformedManifest {
                            path: path.to_path_buf(),
                            reason: format!("survival_days {days} must be non-negative"),
                        });
                    }
                    Some(days)
                }
            };
            let resection_status = c_res
                .and_then(|c| row.get(c))
                .filter(|s| !s.is_empty())
                .map(|s| s.to_string());
            records.push(ManifestRecord {
                subject_id: row.get(c_id).unwrap_or("").to_string(),
                volume_path: PathBuf::from(row.get(c_vol).unwrap_or("")),
                survival_days,
                class_label: survival_days.map(SurvivalClass::from_days),
                resection_status,
            });
        }
        let base = path.parent().map(|p| p.to_path_buf());
        let mut manifest = DatasetManifest::new(records).map_err(|e| match e {
            Error::DuplicateSubject { id } => Error::MalformedManifest {
                path: path.to_path_buf(),
                reason: format!("duplicate subject id {id:?}"),
            },
            other => other,
        })?;
        manifest.base_dir = base;
        Ok(manifest)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::MalformedManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        writer.write_record(["subject_id", "volume_path", "survival_days", "resection_status"])?;
        for r in &self.records {
            let days = r.survival_days.map(|d| d.to_string()).unwrap_or_default();
            writer.write_record([
                r.subject_id.as_str(),
                r.volume_path.to_str().ok_or_else(|| {
                    Error::InvalidConfig(format!("non-UTF8 volume path for {:?}", r.subject_id))
                })?,
                days.as_str(),
                r.resection_status.as_deref().unwrap_or(""),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
