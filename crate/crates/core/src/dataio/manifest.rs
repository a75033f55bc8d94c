use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

/// Stratification covariates of one record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    /// Names of the positive diagnostic labels.
    #[serde(default)]
    pub labels: Vec<String>,
    /// Age decade, e.g. 4 for ages 40 to 49.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_bin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
}

impl Stratum {
    pub fn age_bin_of(age_years: f64) -> u32 {
        (age_years.max(0.0) / 10.0).floor() as u32
    }

    /// Flat tags used as stratification targets.
    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.labels.iter().map(|l| format!("label:{l}")).collect();
        if let Some(a) = self.age_bin {
            tags.push(format!("age:{a}"));
        }
        if let Some(s) = self.sex {
            tags.push(format!("sex:{s:?}"));
        }
        tags
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub strata: BTreeMap<String, Stratum>,
    /// record_id to subject_id.
    #[serde(default)]
    pub subjects: BTreeMap<String, String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_records(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Checks disjointness and subject separation. When `declared` is given
    /// the splits must cover it exactly.
    pub fn validate(&self, declared: Option<&[String]>) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.ids(split) {
                if let Some(prev) = owner.insert(id, split) {
                    return Err(Error::Manifest(format!(
                        "record `{id}` appears in both {prev:?} and {split:?}"
                    )));
                }
            }
        }
        let mut subject_split: BTreeMap<&str, Split> = BTreeMap::new();
        for (&id, &split) in &owner {
            if let Some(subj) = self.subjects.get(id) {
                match subject_split.insert(subj, split) {
                    Some(prev) if prev != split => {
                        return Err(Error::Manifest(format!(
                            "subject `{subj}` appears in both {prev:?} and {split:?}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if let Some(declared) = declared {
            let declared: BTreeSet<&str> = declared.iter().map(String::as_str).collect();
            if let Some(id) = owner.keys().find(|id| !declared.contains(*id)) {
                return Err(Error::Manifest(format!("split lists undeclared record `{id}`")));
            }
            if let Some(id) = declared.iter().find(|id| !owner.contains_key(*id)) {
                return Err(Error::Manifest(format!("record `{id}` is in no split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub record_id: String,
    /// Required for CSV signals, which carry no rate of their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<u32>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: TaskSpec,
    pub records: Vec<RecordEntry>,
    pub split: SplitManifest,
}

impl DatasetManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn validate(&self) -> Result<()> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        self.task.validate()?;
        let ids: Vec<String> = self.records.iter().map(|r| r.record_id.clone()).collect();
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Manifest("duplicate record_id in records".into()));
        }
        self.split.validate(Some(&ids))
    }
}
