//! Pixel confusion counts and the OA / precision / recall / F1 report.
//!
//! Changed pixels are the positive class. Counts are accumulated over the
//! whole evaluation set before any ratio is taken.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary change mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// `value > threshold` (strict) marks a changed pixel.
    pub fn from_scores(
        width: usize,
        height: usize,
        scores: &[f32],
        threshold: f32,
    ) -> Result<Self> {
        Self::new(
            width,
            height,
            scores.iter().map(|&s| s > threshold).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Adds the cross-tabulation of `pred` against `target` to `acc`.
pub fn accumulate(
    pred: &BinaryMask,
    target: &BinaryMask,
    acc: ConfusionCounts,
) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (target.width, target.height) {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.width, pred.height, target.width, target.height
        )));
    }
    let mut acc = acc;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        acc.record(p, t);
    }
    Ok(acc)
}

/// Percentages in `[0, 100]`. A ratio with a zero denominator is reported
/// as 0 and flagged in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub undefined: Vec<String>,
}

impl MetricsReport {
    /// Flat JSON object, percentages rounded to two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let r2 = |v: f64| (v * 100.0).round() / 100.0;
        serde_json::json!({
            "oa": r2(self.oa),
            "pre": r2(self.pre),
            "rec": r2(self.rec),
            "f1": r2(self.f1),
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn_,
            "tn": self.counts.tn,
            "undefined": self.undefined.join(","),
        })
    }

    pub fn is_undefined(&self, metric: &str) -> bool {
        self.undefined.iter().any(|m| m == metric)
    }
}

/// Harmonic mean of two percentages (0 when both are 0).
pub fn f1_from(pre: f64, rec: f64) -> f64 {
    if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    }
}

pub fn compute_metrics(acc: &ConfusionCounts) -> Result<MetricsReport> {
    let total = acc.total();
    if total == 0 {
        return Err(Error::invalid("no pixels were evaluated"));
    }
    let mut undefined = Vec::new();
    let mut ratio = |num: u64, den: u64, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let oa = ratio(acc.tp + acc.tn, total, "oa");
    let pre = ratio(acc.tp, acc.tp + acc.fp, "pre");
    let rec = ratio(acc.tp, acc.tp + acc.fn_, "rec");
    let f1 = if undefined.iter().any(|m| m == "pre" || m == "rec") || pre + rec == 0.0 {
        undefined.push("f1".into());
        0.0
    } else {
        f1_from(pre, rec)
    };
    Ok(MetricsReport {
        oa,
        pre,
        rec,
        f1,
        counts: *acc,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// tp=3, fp=2, fn=5, tn=90 laid out on a 10x10 grid.
    fn grid() -> (BinaryMask, BinaryMask) {
        // indices 0..3 TP, 3..5 FP, 5..10 FN, the rest TN
        let pred: Vec<bool> = (0..100).map(|i| i < 5).collect();
        let truth: Vec<bool> = (0..100).map(|i| i < 3 || (5..10).contains(&i)).collect();
        (
            BinaryMask::new(10, 10, pred).unwrap(),
            BinaryMask::new(10, 10, truth).unwrap(),
        )
    }

    #[test]
    fn hundred_pixel_grid() {
        let (p, t) = grid();
        let c = accumulate(&p, &t, ConfusionCounts::default()).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 3,
                fp: 2,
                fn_: 5,
                tn: 90
            }
        );
        let m = compute_metrics(&c).unwrap();
        assert!((m.oa - 93.0).abs() < 1e-12);
        assert!((m.pre - 60.0).abs() < 1e-12);
        assert!((m.rec - 37.5).abs() < 1e-12);
        assert!((m.f1 - 46.153846).abs() < 1e-5);
    }

    #[test]
    fn all_ones_and_complement() {
        let ones = BinaryMask::filled(4, 5, true);
        let c = accumulate(&ones, &ones, ConfusionCounts::default()).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 20,
                ..Default::default()
            }
        );
        let (p, t) = grid();
        let c = accumulate(&p.complement(), &t, ConfusionCounts::default()).unwrap();
        // flipping the prediction swaps tp/fn and fp/tn
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 90, 3, 2));
        let small = BinaryMask::filled(3, 3, true);
        assert!(accumulate(&small, &ones, c).is_err());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let c = ConfusionCounts {
            tn: 10,
            fn_: 0,
            tp: 0,
            fp: 0,
        };
        let m = compute_metrics(&c).unwrap();
        assert!(m.is_undefined("pre") && m.is_undefined("rec") && m.is_undefined("f1"));
        assert_eq!((m.pre, m.rec, m.f1, m.oa), (0.0, 0.0, 0.0, 100.0));
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn published_rows() {
        for (pre, rec, f1) in [(92.60, 90.68, 91.63), (95.44, 88.37, 91.77)] {
            assert!((f1_from(pre, rec) - f1).abs() <= 0.01);
        }
    }

    #[test]
    fn json_record_is_flat() {
        let (p, t) = grid();
        let m = compute_metrics(&accumulate(&p, &t, ConfusionCounts::default()).unwrap()).unwrap();
        let j = m.to_json();
        assert_eq!(j["f1"], serde_json::json!(46.15));
        assert_eq!(j["fn"], serde_json::json!(5));
    }

    proptest! {
        #[test]
        fn f1_between_precision_and_recall(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let m = compute_metrics(&ConfusionCounts { tp, fp, fn_, tn }).unwrap();
            let lo = m.pre.min(m.rec) - 1e-9;
            let hi = m.pre.max(m.rec) + 1e-9;
            prop_assert!(m.f1 >= lo && m.f1 <= hi);
            if fp == fn_ {
                prop_assert!((m.f1 - m.pre).abs() < 1e-9);
            }
        }

        #[test]
        fn merge_order_is_irrelevant(cells in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200), split in 0usize..200) {
            let split = split.min(cells.len());
            let count = |s: &[(bool, bool)]| {
                let mut c = ConfusionCounts::default();
                for &(p, t) in s { c.record(p, t); }
                c
            };
            let whole = count(&cells);
            let (a, b) = cells.split_at(split);
            prop_assert_eq!(count(a) + count(b), whole);
            prop_assert_eq!(count(b) + count(a), whole);
            prop_assert_eq!(whole.total(), cells.len() as u64);
        }
    }
}
