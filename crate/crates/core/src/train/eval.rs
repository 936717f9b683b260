use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stack_batch;
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::geometry::{decode, temporal_iou, Moment, Proposal};
use crate::model::{Model, Predictions};
use crate::tensor::Real;

pub const RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Percentages over a split. `r_at` is keyed by the threshold as written
/// ("0.3", "0.5", "0.7").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n_queries: usize,
}

impl MetricsReport {
    pub fn from_ious(ious: &[f64]) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        // Sorting fixes the summation order, so the report does not depend
        // on sample order.
        let mut sorted = ious.to_vec();
        sorted.sort_by(f64::total_cmp);
        let r_at = RECALL_THRESHOLDS
            .iter()
            .map(|&m| (format!("{m}"), recall_from_ious(&sorted, m)))
            .collect();
        Ok(Self {
            r_at,
            miou: mean_from_ious(&sorted),
            n_queries: ious.len(),
        })
    }

    pub fn recall(&self, m: f64) -> Option<f64> {
        self.r_at.get(&format!("{m}")).copied()
    }

    /// Fixed-width table with the columns R@0.3 R@0.5 R@0.7 mIoU.
    pub fn table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for (k, v) in &self.r_at {
            header.push_str(&format!("{:>8}", format!("R@{k}")));
            row.push_str(&format!("{v:>8.2}"));
        }
        header.push_str(&format!("{:>8}", "mIoU"));
        row.push_str(&format!("{:>8.2}", self.miou));
        format!("{header}\n{row}\n")
    }
}

fn recall_from_ious(ious: &[f64], m: f64) -> f64 {
    100.0 * ious.iter().filter(|&&iou| iou > m).count() as f64 / ious.len() as f64
}

fn mean_from_ious(ious: &[f64]) -> f64 {
    100.0 * ious.iter().sum::<f64>() / ious.len() as f64
}

fn paired_ious(pred: &[Moment], gts: &[Moment]) -> Result<Vec<f64>> {
    if pred.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            gts.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    Ok(pred.iter().zip(gts).map(|(&p, &g)| temporal_iou(p, g)).collect())
}

/// Percentage of queries whose IoU is strictly larger than `m`.
pub fn recall_at(pred: &[Moment], gts: &[Moment], m: f64) -> Result<f64> {
    Ok(recall_from_ious(&paired_ious(pred, gts)?, m))
}

pub fn mean_iou(pred: &[Moment], gts: &[Moment]) -> Result<f64> {
    Ok(mean_from_ious(&paired_ious(pred, gts)?))
}

/// Highest-scoring proposal (lowest index on ties) refined by its offsets.
pub fn select_top1(pred: &Predictions, proposals: &[Proposal], alpha: f64, beta: f64) -> Result<Moment> {
    if pred.iou.len() != proposals.len() || pred.dc.len() != proposals.len() || pred.dw.len() != proposals.len() {
        return Err(Error::Shape {
            what: "head outputs".into(),
            expected: vec![proposals.len()],
            found: vec![pred.iou.len()],
        });
    }
    let mut best = 0;
    for (j, &score) in pred.iou.iter().enumerate() {
        if score > pred.iou[best] {
            best = j;
        }
    }
    Ok(decode(proposals[best].anchor, pred.dc[best], pred.dw[best], alpha, beta))
}

/// Normalized top-1 moment for one sample; see [`Moment::to_seconds`].
pub fn infer_top1<T: Real>(model: &Model<T>, sample: &GroundingSample) -> Result<Moment> {
    Ok(infer_batch(model, &[sample])?.remove(0))
}

fn infer_batch<T: Real>(model: &Model<T>, samples: &[&GroundingSample]) -> Result<Vec<Moment>> {
    let (video, text) = stack_batch::<T>(samples)?;
    let cfg = model.config();
    model
        .predict(&video, &text)?
        .iter()
        .map(|p| select_top1(p, model.proposals(), cfg.alpha, cfg.beta))
        .collect()
}

/// Top-1 predictions for every sample, in input order.
pub fn predict_moments<T: Real>(
    model: &Model<T>,
    samples: &[GroundingSample],
    batch_size: usize,
) -> Result<Vec<Moment>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let refs: Vec<&GroundingSample> = samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(batch_size) {
        out.extend(infer_batch(model, chunk)?);
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &Model<T>, samples: &[GroundingSample], batch_size: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = predict_moments(model, samples, batch_size)?;
    let gts: Vec<Moment> = samples.iter().map(|s| s.gt).collect();
    MetricsReport::from_ious(&paired_ious(&pred, &gts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::proposal_grid;

    fn with_iou(gt: Moment, iou: f64) -> Moment {
        // Same start, width scaled so the overlap ratio is `iou`.
        Moment::from_interval(gt.start(), gt.start() + gt.w * iou)
    }

    #[test]
    fn three_query_example() {
        let gts = vec![Moment::new(0.5, 0.4); 3];
        let pred: Vec<Moment> = [0.4, 0.6, 0.75].iter().map(|&i| with_iou(gts[0], i)).collect();
        assert!((recall_at(&pred, &gts, 0.3).unwrap() - 100.0).abs() < 1e-9);
        assert!((recall_at(&pred, &gts, 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert!((recall_at(&pred, &gts, 0.7).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!((mean_iou(&pred, &gts).unwrap() - 175.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn strict_threshold_and_edge_cases() {
        let gt = Moment::new(0.5, 0.5);
        let half = with_iou(gt, 0.5);
        assert_eq!(recall_at(&[half], &[gt], 0.5).unwrap(), 0.0);
        assert_eq!(recall_at(&[gt], &[gt], 0.7).unwrap(), 100.0);
        assert_eq!(mean_iou(&[Moment::new(0.05, 0.1)], &[Moment::new(0.9, 0.1)]).unwrap(), 0.0);
        assert!(recall_at(&[], &[], 0.5).is_err());
        assert!(mean_iou(&[gt], &[]).is_err());
    }

    #[test]
    fn report_table_and_keys() {
        let r = MetricsReport::from_ious(&[0.4, 0.6, 0.75]).unwrap();
        assert_eq!(r.r_at.keys().collect::<Vec<_>>(), vec!["0.3", "0.5", "0.7"]);
        assert_eq!(r.recall(0.3), Some(100.0));
        let table = r.table();
        assert!(table.starts_with("   R@0.3   R@0.5   R@0.7    mIoU\n"), "{table}");
        assert!(table.contains("  100.00   66.67   33.33   58.33"), "{table}");
    }

    #[test]
    fn top1_picks_highest_and_breaks_ties_low() {
        let grid = proposal_grid(2, 2, &[1.0]).unwrap();
        let pred = Predictions {
            iou: vec![0.2, 0.9, 0.9],
            dc: vec![0.0; 3],
            dw: vec![0.0; 3],
        };
        assert_eq!(select_top1(&pred, &grid, 0.3, 0.3).unwrap(), grid[1].anchor);
        let flat = Predictions {
            iou: vec![0.5; 3],
            ..pred.clone()
        };
        assert_eq!(select_top1(&flat, &grid, 0.3, 0.3).unwrap(), grid[0].anchor);
        let wide = Predictions {
            iou: vec![1.0, 0.0, 0.0],
            dc: vec![-1.0, 0.0, 0.0],
            dw: vec![1.0, 0.0, 0.0],
        };
        let m = select_top1(&wide, &grid, 0.3, 0.3).unwrap();
        assert!(m.start() >= 0.0 && m.end() <= 1.0);
    }
}
