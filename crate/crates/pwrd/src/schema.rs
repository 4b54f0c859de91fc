//! Mapping from logical panel fields to CSV column names.

use std::collections::BTreeMap;

use csv::StringRecord;
use serde::{Deserialize, Serialize};

/// Column names for each logical field. Field names double as the default
/// column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default = "names::unit")]
    pub unit: String,
    #[serde(default = "names::cluster")]
    pub cluster: String,
    #[serde(default)]
    pub block: Option<String>,
    #[serde(default = "names::treatment")]
    pub treatment: String,
    #[serde(default = "names::cohort")]
    pub cohort: String,
    #[serde(default = "names::grade")]
    pub grade: String,
    #[serde(default = "names::year")]
    pub year: String,
    #[serde(default = "names::outcome")]
    pub outcome: String,
    #[serde(default)]
    pub tested_in: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Derives `tested_in` from a score column when the flag column is absent.
    #[serde(default)]
    pub test_in_rule: Option<ThresholdRule>,
}

/// Per-grade cutoffs applied to a score column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRule {
    /// Score column; the outcome column when omitted.
    #[serde(default)]
    pub score: Option<String>,
    pub cutoffs: BTreeMap<i32, f64>,
    #[serde(default)]
    pub defer_one_year: bool,
}

mod names {
    pub fn unit() -> String {
        "unit".into()
    }
    pub fn cluster() -> String {
        "cluster".into()
    }
    pub fn treatment() -> String {
        "treatment".into()
    }
    pub fn cohort() -> String {
        "cohort".into()
    }
    pub fn grade() -> String {
        "grade".into()
    }
    pub fn year() -> String {
        "year".into()
    }
    pub fn outcome() -> String {
        "outcome".into()
    }
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            unit: names::unit(),
            cluster: names::cluster(),
            block: None,
            treatment: names::treatment(),
            cohort: names::cohort(),
            grade: names::grade(),
            year: names::year(),
            outcome: names::outcome(),
            tested_in: None,
            covariates: Vec::new(),
            test_in_rule: None,
        }
    }
}

impl Schema {
    /// Default names, picking up optional `block` and `tested_in` columns
    /// when the header has them.
    pub fn detect(headers: &StringRecord) -> Self {
        let has = |n: &str| headers.iter().any(|h| h == n);
        Self {
            block: has("block").then(|| "block".to_string()),
            tested_in: has("tested_in").then(|| "tested_in".to_string()),
            ..Self::default()
        }
    }
}
