//! Core categorical types and day-band constants shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of voxel label channels: background + 3 tumor structures (M_x).
pub const CHANNEL_COUNT: usize = 4;

/// Number of survival groups (M_y).
pub const CLASS_COUNT: usize = 3;

/// Average calendar month length in days (365.25 / 12).
pub const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

/// Days below which a subject is a short-survivor (10 months).
pub const SHORT_MID_THRESHOLD_DAYS: f64 = 10.0 * DAYS_PER_MONTH;

/// Days above which a subject is a long-survivor (15 months).
pub const MID_LONG_THRESHOLD_DAYS: f64 = 15.0 * DAYS_PER_MONTH;

/// Survival group label: y ∈ {short, mid, long}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalClass {
    Short,
    Mid,
    Long,
}

impl SurvivalClass {
    pub const ALL: [SurvivalClass; CLASS_COUNT] =
        [SurvivalClass::Short, SurvivalClass::Mid, SurvivalClass::Long];

    /// Zero-based class index (short=0, mid=1, long=2).
    pub fn index(self) -> usize {
        match self {
            SurvivalClass::Short => 0,
            SurvivalClass::Mid => 1,
            SurvivalClass::Long => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(Error::LabelOutOfRange {
                value: index as i64,
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            SurvivalClass::Short => "short",
            SurvivalClass::Mid => "mid",
            SurvivalClass::Long => "long",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "short" => Ok(SurvivalClass::Short),
            "mid" => Ok(SurvivalClass::Mid),
            "long" => Ok(SurvivalClass::Long),
            other => Err(Error::InvalidConfig(format!(
                "unknown survival class name {other:?}"
            ))),
        }
    }

    /// Map survival days to a class: short < 10 months ≤ mid ≤ 15 months < long,
    /// with one month = 365.25/12 days.
    pub fn from_days(days: f64) -> Self {
        if days < SHORT_MID_THRESHOLD_DAYS {
            SurvivalClass::Short
        } else if days <= MID_LONG_THRESHOLD_DAYS {
            SurvivalClass::Mid
        } else {
            SurvivalClass::Long
        }
    }

    /// Inclusive-exclusive day band for this class, as (low, high).
    pub fn day_band(self) -> (f64, f64) {
        match self {
            SurvivalClass::Short => (0.0, SHORT_MID_THRESHOLD_DAYS),
            SurvivalClass::Mid => (SHORT_MID_THRESHOLD_DAYS, MID_LONG_THRESHOLD_DAYS),
            SurvivalClass::Long => (MID_LONG_THRESHOLD_DAYS, f64::INFINITY),
        }
    }
}
