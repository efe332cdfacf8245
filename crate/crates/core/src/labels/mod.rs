//! Weak labels from radiology report text: SUVmax extraction per anatomical
//! region, the ±25% response rule, and longitudinal pairing of exams.

mod pairs;
mod parser;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OncoError, Result};

pub use pairs::{
    label_pairs, load_reports, read_manifest, write_manifest, PairLabel, PairLabelRow, ReportCorpus, ReportRecord,
    MANIFEST_HEADER,
};
pub use parser::{parse_report, region_suvmax, LesionMention, ParseWarning, ReportFindings, WarningKind};

/// Anatomical sections of a report findings block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionName {
    HeadNeck,
    Thorax,
    AbdomenPelvis,
}

impl RegionName {
    pub const ALL: [RegionName; 3] = [RegionName::HeadNeck, RegionName::Thorax, RegionName::AbdomenPelvis];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionName::HeadNeck => "head_neck",
            RegionName::Thorax => "thorax",
            RegionName::AbdomenPelvis => "abdomen",
        }
    }
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionName {
    type Err = OncoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thorax" => Ok(RegionName::Thorax),
            "abdomen" | "abdomen_pelvis" | "abdomenpelvis" => Ok(RegionName::AbdomenPelvis),
            "head_neck" | "headneck" => Ok(RegionName::HeadNeck),
            other => Err(OncoError::Config(format!("unknown region {other:?}"))),
        }
    }
}

/// Three-way treatment response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseLabel {
    Progression,
    Resolution,
    Stable,
}

impl ResponseLabel {
    /// Class order used for logits and probability vectors.
    pub const ALL: [ResponseLabel; 3] = [
        ResponseLabel::Progression,
        ResponseLabel::Resolution,
        ResponseLabel::Stable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseLabel::Progression => "progression",
            ResponseLabel::Resolution => "resolution",
            ResponseLabel::Stable => "stable",
        }
    }

    /// Label after reversing the temporal order of a pair.
    pub fn flipped(self) -> Self {
        match self {
            ResponseLabel::Progression => ResponseLabel::Resolution,
            ResponseLabel::Resolution => ResponseLabel::Progression,
            ResponseLabel::Stable => ResponseLabel::Stable,
        }
    }
}

impl fmt::Display for ResponseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResponseLabel {
    type Err = OncoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "progression" => Ok(ResponseLabel::Progression),
            "resolution" => Ok(ResponseLabel::Resolution),
            "stable" => Ok(ResponseLabel::Stable),
            other => Err(OncoError::Data(format!("unknown response label {other:?}"))),
        }
    }
}

/// Relative change threshold, in percent, separating change from stability.
pub const CHANGE_THRESHOLD_PERCENT: f64 = 25.0;

/// Baseline and follow-up SUVmax with the percent change relative to baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuvPair {
    pub suv_pre: f64,
    pub suv_post: f64,
    pub percent_change: f64,
}

impl SuvPair {
    pub fn new(suv_pre: f64, suv_post: f64) -> Result<Self> {
        for (what, v) in [("baseline", suv_pre), ("follow-up", suv_post)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OncoError::Domain(format!(
                    "{what} SUVmax must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(Self {
            suv_pre,
            suv_post,
            percent_change: (suv_post - suv_pre) / suv_pre * 100.0,
        })
    }

    /// Same measurements in reverse temporal order.
    pub fn flipped(&self) -> Self {
        Self::new(self.suv_post, self.suv_pre).expect("values already validated")
    }
}

/// Classifies a pair of SUVmax values: above +25% is progression, below
/// -25% is resolution, and the closed interval [-25%, +25%] is stable.
pub fn lugano_classify(suv_pre: f64, suv_post: f64) -> Result<(ResponseLabel, SuvPair)> {
    let pair = SuvPair::new(suv_pre, suv_post)?;
    let label = if pair.percent_change > CHANGE_THRESHOLD_PERCENT {
        ResponseLabel::Progression
    } else if pair.percent_change < -CHANGE_THRESHOLD_PERCENT {
        ResponseLabel::Resolution
    } else {
        ResponseLabel::Stable
    };
    Ok((label, pair))
}
