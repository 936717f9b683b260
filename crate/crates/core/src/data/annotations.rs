use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Moment;

/// One (video, query, moment) record. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub video_id: String,
    pub duration_s: f64,
    pub query: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Annotation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.is_empty() || self.video_id.contains(['/', '\\']) || self.video_id.starts_with('.') {
            return Err(format!("video_id {:?} is not a usable file stem", self.video_id));
        }
        let times = [self.duration_s, self.start_s, self.end_s];
        if times.iter().any(|t| !t.is_finite()) {
            return Err("times must be finite".into());
        }
        if !(0.0 <= self.start_s && self.start_s < self.end_s && self.end_s <= self.duration_s) {
            return Err(format!(
                "need 0 <= start_s < end_s <= duration_s, got start {} end {} duration {}",
                self.start_s, self.end_s, self.duration_s
            ));
        }
        Ok(())
    }

    /// Ground truth in normalized time.
    pub fn moment(&self) -> Moment {
        Moment::from_interval(self.start_s / self.duration_s, self.end_s / self.duration_s)
    }
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let json = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let records: Vec<serde_json::Value> = serde_json::from_str(text).map_err(json)?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let a: Annotation = serde_json::from_value(value).map_err(|e| Error::Annotation {
                index,
                reason: e.to_string(),
            })?;
            a.validate().map_err(|reason| Error::Annotation { index, reason })?;
            Ok(a)
        })
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn write_annotations(path: &Path, records: &[Annotation]) -> Result<()> {
    let json = serde_json::to_string_pretty(records).expect("annotations serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Sample ids for a split: `<video_id>_q<k>` where `k` counts earlier
/// records of the same video.
pub fn sample_ids(records: &[Annotation]) -> Vec<String> {
    let mut seen = std::collections::HashMap::<&str, usize>::new();
    records
        .iter()
        .map(|a| {
            let k = seen.entry(a.video_id.as_str()).or_insert(0);
            let id = format!("{}_q{}", a.video_id, k);
            *k += 1;
            id
        })
        .collect()
}
