//! On-disk split layout:
//!
//! ```text
//! <root>/<split>.json              annotation array
//! <root>/features/<video_id>.tvgf  [L, d_in_video]
//! <root>/text/<sample_id>.tvgf     [d_in_text]
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::annotations::{read_annotations, sample_ids, write_annotations, Annotation};
use super::resample::resample_snippets;
use super::synthetic::GroundingSample;
use super::tvgf::{read_feature_file, write_feature_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn split_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.json"))
}

pub fn video_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("features").join(format!("{video_id}.tvgf"))
}

pub fn text_path(root: &Path, sample_id: &str) -> PathBuf {
    root.join("text").join(format!("{sample_id}.tvgf"))
}

/// Writes annotations in seconds plus one feature file per video and per query.
pub fn write_split(root: &Path, split: &str, samples: &[GroundingSample]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let records: Vec<Annotation> = samples
        .iter()
        .map(|s| {
            let (start_s, end_s) = s.gt.to_seconds(s.duration_s);
            Annotation {
                video_id: s.video_id.clone(),
                duration_s: s.duration_s,
                query: s.query.clone(),
                start_s,
                end_s,
            }
        })
        .collect();
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|reason| Error::Annotation { index, reason })?;
    }
    let ids = sample_ids(&records);
    for (s, id) in samples.iter().zip(&ids) {
        write_feature_file(&video_path(root, &s.video_id), &s.video)?;
        write_feature_file(&text_path(root, id), &s.text)?;
    }
    write_annotations(&split_path(root, split), &records)
}

/// Reads a split and resamples every video to `n_snippets` rows.
pub fn load_split(root: &Path, split: &str, n_snippets: usize) -> Result<Vec<GroundingSample>> {
    let records = read_annotations(&split_path(root, split))?;
    if records.is_empty() {
        return Err(Error::Empty("annotation split"));
    }
    let ids = sample_ids(&records);
    let mut videos: HashMap<&str, Tensor<f32>> = HashMap::new();
    let mut samples = Vec::with_capacity(records.len());
    let mut widths: Option<(usize, usize)> = None;
    for (a, id) in records.iter().zip(ids) {
        if !videos.contains_key(a.video_id.as_str()) {
            let path = video_path(root, &a.video_id);
            let raw = read_feature_file(&path)?;
            videos.insert(&a.video_id, resample_snippets(&raw, n_snippets)?);
        }
        let video = videos[a.video_id.as_str()].clone();
        let text = read_feature_file(&text_path(root, &id))?;
        if text.rank() != 1 {
            return Err(Error::Shape {
                what: format!("text feature {id}"),
                expected: vec![text.numel()],
                found: text.shape().to_vec(),
            });
        }
        let dims = (video.shape()[1], text.numel());
        match widths {
            None => widths = Some(dims),
            Some(w) if w != dims => {
                return Err(Error::Shape {
                    what: format!("feature widths (video, text) of {id}"),
                    expected: vec![w.0, w.1],
                    found: vec![dims.0, dims.1],
                })
            }
            _ => {}
        }
        samples.push(GroundingSample {
            id,
            video_id: a.video_id.clone(),
            query: a.query.clone(),
            video,
            text,
            gt: a.moment(),
            duration_s: a.duration_s,
        });
    }
    Ok(samples)
}
