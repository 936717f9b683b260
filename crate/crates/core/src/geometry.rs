//! Anchor grid over the feature pyramid, temporal IoU, and the offset
//! transforms between anchors and moments.
//!
//! All times are fractions of the video duration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal segment given by center and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub c: f64,
    pub w: f64,
}

impl Moment {
    pub fn new(c: f64, w: f64) -> Self {
        Self { c, w }
    }

    pub fn from_interval(start: f64, end: f64) -> Self {
        Self {
            c: 0.5 * (start + end),
            w: end - start,
        }
    }

    pub fn start(&self) -> f64 {
        self.c - 0.5 * self.w
    }

    pub fn end(&self) -> f64 {
        self.c + 0.5 * self.w
    }

    /// Positive width and a nonempty overlap with `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.c.is_finite() && self.w.is_finite() && self.w > 0.0 && self.start() < 1.0 && self.end() > 0.0
    }

    pub fn to_seconds(&self, duration_s: f64) -> (f64, f64) {
        (self.start() * duration_s, self.end() * duration_s)
    }
}

/// A fixed anchor attached to pyramid cell `position` of `level` (0 = the
/// finest level) with scale ratio index `ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub anchor: Moment,
    pub level: usize,
    pub position: usize,
    pub ratio: usize,
    pub flat_index: usize,
}

/// Temporal lengths of the pyramid levels: `l1, l1/s, ..., 1`.
pub fn pyramid_lengths(l1: usize, stride: usize) -> Result<Vec<usize>> {
    if stride < 2 {
        return Err(Error::Geometry(format!("stride must be at least 2, got {stride}")));
    }
    if l1 == 0 {
        return Err(Error::Geometry("L1 must be positive".into()));
    }
    let mut lengths = vec![l1];
    let mut len = l1;
    while len > 1 {
        if len % stride != 0 {
            return Err(Error::Geometry(format!("L1 = {l1} is not a power of stride {stride}")));
        }
        len /= stride;
        lengths.push(len);
    }
    Ok(lengths)
}

pub(crate) fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::Geometry("at least one scale ratio is required".into()));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Geometry(format!("ratios must be positive, got {ratios:?}")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Geometry(format!("ratios must be strictly ascending, got {ratios:?}")));
    }
    Ok(())
}

/// Anchors in canonical order: level-major, then position, then ratio.
/// Cell `i` of a level of length `L` is centered at `(i + 0.5) / L` and the
/// anchor for ratio `r` has width `r / L`.
pub fn proposal_grid(l1: usize, stride: usize, ratios: &[f64]) -> Result<Vec<Proposal>> {
    validate_ratios(ratios)?;
    let lengths = pyramid_lengths(l1, stride)?;
    let total = ratios.len() * lengths.iter().sum::<usize>();
    let mut grid = Vec::with_capacity(total);
    for (level, &len) in lengths.iter().enumerate() {
        let span = 1.0 / len as f64;
        for position in 0..len {
            let c = (position as f64 + 0.5) * span;
            for (ratio, &r) in ratios.iter().enumerate() {
                grid.push(Proposal {
                    anchor: Moment::new(c, r * span),
                    level,
                    position,
                    ratio,
                    flat_index: grid.len(),
                });
            }
        }
    }
    Ok(grid)
}

/// Intersects the segment with `[0, 1]`. An empty intersection collapses to
/// a zero-width moment at the nearer boundary.
pub fn clamp_moment(m: Moment) -> Moment {
    if m.start() >= 0.0 && m.end() <= 1.0 {
        return m;
    }
    let start = m.start().max(0.0);
    let end = m.end().min(1.0);
    if end > start {
        Moment::from_interval(start, end)
    } else {
        let edge = if m.end() <= 0.0 { 0.0 } else { 1.0 };
        Moment::new(edge, 0.0)
    }
}

/// Intersection over union of the two segments after clamping to `[0, 1]`.
pub fn temporal_iou(a: Moment, b: Moment) -> f64 {
    let span = |m: Moment| (m.start().clamp(0.0, 1.0), m.end().clamp(0.0, 1.0));
    let ((s1, e1), (s2, e2)) = (span(a), span(b));
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Applies predicted offsets to an anchor without clamping:
/// `w = ŵ·exp(β·δw)`, `c = ĉ + α·ŵ·δc`.
pub fn decode_unclamped(anchor: Moment, dc: f64, dw: f64, alpha: f64, beta: f64) -> Moment {
    let w = anchor.w * (beta * dw).exp();
    let c = anchor.c + alpha * anchor.w * dc;
    Moment::new(c, w)
}

pub fn decode(anchor: Moment, dc: f64, dw: f64, alpha: f64, beta: f64) -> Moment {
    clamp_moment(decode_unclamped(anchor, dc, dw, alpha, beta))
}

/// Regression targets `(δ̄c, δ̄w)` that make [`decode_unclamped`] reproduce `gt`.
pub fn encode(gt: Moment, anchor: Moment, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if !(gt.w > 0.0 && anchor.w > 0.0) {
        return Err(Error::Geometry(format!(
            "encode needs positive widths, got target {} and anchor {}",
            gt.w, anchor.w
        )));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Geometry(format!("alpha and beta must be positive, got {alpha}, {beta}")));
    }
    let dc = (gt.c - anchor.c) / (alpha * anchor.w);
    let dw = (gt.w / anchor.w).ln() / beta;
    Ok((dc, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_cell_grid() {
        let grid = proposal_grid(2, 2, &[1.0]).unwrap();
        let got: Vec<(f64, f64)> = grid.iter().map(|p| (p.anchor.c, p.anchor.w)).collect();
        assert_eq!(got, vec![(0.25, 0.5), (0.75, 0.5), (0.5, 1.0)]);
        assert_eq!(grid[2].level, 1);
    }

    #[test]
    fn single_cell_grid() {
        let grid = proposal_grid(1, 2, &[0.5, 1.0]).unwrap();
        assert_eq!(grid.len(), 2);
        assert!(grid.iter().all(|p| p.anchor.c == 0.5));
    }

    #[test]
    fn grid_count_is_geometric_series() {
        for l1 in [1usize, 2, 4, 8, 64, 128] {
            for k in 1..=3 {
                let ratios: Vec<f64> = (1..=k).map(|r| r as f64 * 0.5).collect();
                let grid = proposal_grid(l1, 2, &ratios).unwrap();
                assert_eq!(grid.len(), k * (2 * l1 - 1));
            }
        }
        let grid = proposal_grid(27, 3, &[1.0]).unwrap();
        assert_eq!(grid.len(), (3 * 27 - 1) / 2);
    }

    #[test]
    fn rejects_non_power_length_and_bad_ratios() {
        assert!(proposal_grid(127, 2, &[1.0]).is_err());
        assert!(proposal_grid(8, 2, &[1.0, 0.5]).is_err());
        assert!(proposal_grid(8, 2, &[]).is_err());
        assert!(proposal_grid(8, 2, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn pyramid_of_128() {
        assert_eq!(pyramid_lengths(128, 2).unwrap(), vec![128, 64, 32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn iou_basics() {
        let m = Moment::new(0.4, 0.2);
        assert_eq!(temporal_iou(m, m), 1.0);
        assert_eq!(temporal_iou(Moment::new(0.1, 0.1), Moment::new(0.8, 0.1)), 0.0);
        let a = Moment::from_interval(0.0 / 20.0, 10.0 / 20.0);
        let b = Moment::from_interval(5.0 / 20.0, 15.0 / 20.0);
        assert!(close(temporal_iou(a, b), 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn decode_examples() {
        let anchor = Moment::new(0.5, 0.2);
        assert_eq!(decode(anchor, 0.0, 0.0, 0.3, 0.3), anchor);
        let m = decode(anchor, 0.5, 0.0, 0.3, 0.3);
        assert!(close(m.c, 0.53, 1e-12) && close(m.w, 0.2, 1e-12));
        let m = decode(anchor, 0.0, 1.0, 0.3, 0.2);
        assert!(close(m.w, 0.244_280_551_632_034, 1e-12), "{}", m.w);
    }

    #[test]
    fn encode_examples() {
        let anchor = Moment::new(0.5, 0.2);
        assert_eq!(encode(anchor, anchor, 0.3, 0.3).unwrap(), (0.0, 0.0));
        let (dc, dw) = encode(Moment::new(0.53, 0.2), anchor, 0.3, 0.3).unwrap();
        assert!(close(dc, 0.5, 1e-12) && dw == 0.0);
        assert!(encode(Moment::new(0.5, 0.0), anchor, 0.3, 0.3).is_err());
        assert!(encode(anchor, Moment::new(0.5, -1.0), 0.3, 0.3).is_err());
    }

    #[test]
    fn clamp_examples() {
        let inside = Moment::new(0.5, 0.2);
        assert_eq!(clamp_moment(inside), inside);
        let m = clamp_moment(Moment::new(1.0, 0.4));
        assert!(close(m.c, 0.9, 1e-12) && close(m.w, 0.2, 1e-12));
        assert_eq!(clamp_moment(Moment::new(-0.5, 0.2)), Moment::new(0.0, 0.0));
        assert_eq!(clamp_moment(Moment::new(1.5, 0.2)), Moment::new(1.0, 0.0));
    }
}
