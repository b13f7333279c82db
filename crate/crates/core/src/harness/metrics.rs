use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::PanopticMap;

/// Global confusion counts, `counts[gt * C + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Add the non-void pixels of one label map.
    pub fn add(&mut self, pred: &[u16], gt: &PanopticMap) -> Result<()> {
        if pred.len() != gt.class_id.len() {
            return Err(Error::Contract("prediction and label sizes differ".into()));
        }
        for (i, &p) in pred.iter().enumerate() {
            if gt.is_void(i) {
                continue;
            }
            let g = gt.class_id[i] as usize;
            if g >= self.classes || p as usize >= self.classes {
                return Err(Error::Contract(format!(
                    "class {g}/{p} outside {} classes",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both truth and
    /// prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub depth_mae: Option<f64>,
    pub depth_log_rmse: Option<f64>,
    pub cond_accuracy: Option<f64>,
}

/// Running sums for depth errors against the reference depth.
#[derive(Debug, Clone, Default)]
pub(crate) struct DepthErrors {
    abs: f64,
    sq_log: f64,
    n: usize,
}

impl DepthErrors {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], valid: &[bool], d_min: f64, d_max: f64) {
        for i in 0..pred.len() {
            if valid[i] {
                let t = truth[i].clamp(d_min, d_max);
                self.abs += (pred[i] - t).abs();
                self.sq_log += (pred[i].ln() - t.ln()).powi(2);
                self.n += 1;
            }
        }
    }

    pub fn finish(&self) -> (Option<f64>, Option<f64>) {
        if self.n == 0 {
            return (None, None);
        }
        let n = self.n as f64;
        (Some(self.abs / n), Some((self.sq_log / n).sqrt()))
    }
}

/// Channel argmax of `[C, H, W]` logits; ties go to the lower class.
pub fn argmax_classes(logits: &[f64], c: usize) -> Vec<u16> {
    let n = logits.len() / c;
    (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if logits[k * n + p] > logits[best * n + p] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(c: &[u16]) -> PanopticMap {
        PanopticMap {
            height: 1,
            width: c.len(),
            class_id: c.to_vec(),
            instance_id: vec![1; c.len()],
        }
    }

    #[test]
    fn two_class_toy() {
        let mut m = ConfusionMatrix::new(2);
        m.add(&[0, 1, 1, 1], &labels(&[0, 0, 1, 1])).unwrap();
        let iou = m.iou();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_and_absent_classes() {
        let mut m = ConfusionMatrix::new(5);
        m.add(&[0, 3, 3], &labels(&[0, 3, 3])).unwrap();
        assert_eq!(m.miou(), 1.0);
        assert_eq!(m.iou().iter().filter(|x| x.is_none()).count(), 3);
    }

    #[test]
    fn void_pixels_are_skipped() {
        let mut m = ConfusionMatrix::new(2);
        m.add(&[1, 1], &labels(&[0, crate::scenegen::VOID_CLASS]))
            .unwrap();
        assert_eq!(m.counts.iter().sum::<u64>(), 1);
    }
}
