//! Confusion-matrix accumulation and intersection-over-union metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, IGNORE_LABEL};

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one image's predictions; pixels whose truth is `IGNORE_LABEL`
    /// are counted as ignored and skipped.
    pub fn accumulate(&mut self, prediction: &Array2<u32>, truth: &Array2<u32>) -> Result<()> {
        if prediction.dim() != truth.dim() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs truth {:?}",
                prediction.dim(),
                truth.dim()
            )));
        }
        let n = self.num_classes() as u32;
        for (&p, &t) in prediction.iter().zip(truth.iter()) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if t >= n || p >= n {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    channels: n as usize,
                });
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Sums two matrices; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes(), other.num_classes());
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
        self.ignored += other.ignored;
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither truth nor prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes();
        (0..n)
            .map(|c| {
                let tp = self.counts[c][c];
                let fname: u64 = (0..n).filter(|&j| j != c).map(|j| self.counts[c][j]).sum();
                let fp: u64 = (0..n).filter(|&j| j != c).map(|j| self.counts[j][c]).sum();
                let denom = tp + fp + fname;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Unweighted mean of the defined per-class IoUs, optionally restricted
    /// to a class subset. `None` when no class in the subset is defined.
    pub fn miou(&self, subset: Option<&[usize]>) -> Option<f64> {
        let ious = self.iou_per_class();
        let values: Vec<f64> = match subset {
            Some(classes) => classes.iter().filter_map(|&c| ious[c]).collect(),
            None => ious.into_iter().flatten().collect(),
        };
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Per-class IoU table with an optional background/foreground grouping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub background_classes: Vec<usize>,
    pub background_mean: Option<f64>,
    pub foreground_mean: Option<f64>,
}

impl IouReport {
    pub fn from_matrix(cm: &ConfusionMatrix, background_classes: &[usize]) -> Self {
        let foreground: Vec<usize> = (0..cm.num_classes())
            .filter(|c| !background_classes.contains(c))
            .collect();
        Self {
            per_class: cm.iou_per_class(),
            miou: cm.miou(None),
            background_classes: background_classes.to_vec(),
            background_mean: cm.miou(Some(background_classes)),
            foreground_mean: cm.miou(Some(&foreground)),
        }
    }

    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "class  group       iou").unwrap();
        for (c, iou) in self.per_class.iter().enumerate() {
            let group = if self.background_classes.contains(&c) {
                "background"
            } else {
                "foreground"
            };
            match iou {
                Some(v) => writeln!(out, "{c:<6} {group:<10} {v:.4}").unwrap(),
                None => writeln!(out, "{c:<6} {group:<10} undefined").unwrap(),
            }
        }
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        writeln!(out, "background mean: {}", fmt(self.background_mean)).unwrap();
        writeln!(out, "foreground mean: {}", fmt(self.foreground_mean)).unwrap();
        writeln!(out, "mIoU: {}", fmt(self.miou)).unwrap();
        out
    }
}
