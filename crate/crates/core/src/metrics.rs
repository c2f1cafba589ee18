//! Mask evaluation: mean absolute error and adaptive-threshold F-measure.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::io::read_pgm;
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_BETA2: f64 = 0.3;

fn same_shape(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(op, format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    if pred.numel() == 0 {
        return Err(invalid(op, "empty map"));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("mae", pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FMeasure {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Adaptive threshold `min(2·mean(pred), 1)`.
pub fn adaptive_threshold(pred: &Tensor) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// F-measure of `pred` binarized at the adaptive threshold. A pixel is
/// predicted positive when its score is nonzero and reaches the threshold.
pub fn f_measure(pred: &Tensor, gt: &Tensor, beta2: f64) -> Result<FMeasure> {
    same_shape("f_measure", pred, gt)?;
    let threshold = adaptive_threshold(pred);
    let (mut tp, mut pp, mut pos) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let hit = p > 0.0 && p >= threshold;
        let truth = g > 0.5;
        pp += hit as usize;
        pos += truth as usize;
        tp += (hit && truth) as usize;
    }
    if pos == 0 {
        return Err(invalid("f_measure", "ground truth has no positive pixel; recall is undefined"));
    }
    let precision = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
    let recall = tp as f64 / pos as f64;
    let denom = beta2 * precision + recall;
    let f = if denom == 0.0 { 0.0 } else { (1.0 + beta2) * precision * recall / denom };
    Ok(FMeasure { threshold, precision, recall, f })
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub f_measure: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_mae: f64,
    pub mean_f_measure: f64,
    pub beta2: f64,
    pub threshold_policy: &'static str,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "name,mae,f_measure,threshold"
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::csv_header());
        for m in &self.images {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", m.name, m.mae, m.f_measure, m.threshold));
        }
        s.push_str(&format!("mean,{:.6},{:.6},\n", self.mean_mae, self.mean_f_measure));
        s
    }
}

pub fn evaluate(pairs: &[(String, Tensor, Tensor)], beta2: f64) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(invalid("evaluate", "no images"));
    }
    let results = par::map_range(pairs.len(), |i| -> Result<ImageMetrics> {
        let (name, pred, gt) = &pairs[i];
        let f = f_measure(pred, gt, beta2)?;
        Ok(ImageMetrics {
            name: name.clone(),
            mae: mae(pred, gt)?,
            f_measure: f.f,
            threshold: f.threshold,
        })
    });
    let images: Vec<ImageMetrics> = results.into_iter().collect::<Result<_>>()?;
    let n = images.len() as f64;
    Ok(MetricsReport {
        mean_mae: images.iter().map(|m| m.mae).sum::<f64>() / n,
        mean_f_measure: images.iter().map(|m| m.f_measure).sum::<f64>() / n,
        images,
        beta2,
        threshold_policy: "adaptive min(2*mean(pred), 1)",
    })
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs every `*.pgm` in `gt_dir` with the same file name in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, beta2: f64) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    for gt_path in pgm_files(gt_dir)? {
        let name = gt_path.file_name().expect("listed file").to_string_lossy().into_owned();
        let pred_path = pred_dir.join(&name);
        if !pred_path.exists() {
            return Err(invalid("evaluate_dirs", format!("missing prediction {}", pred_path.display())));
        }
        pairs.push((name, read_pgm(&pred_path)?, read_pgm(&gt_path)?));
    }
    evaluate(&pairs, beta2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_quadrant() {
        let gt = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect()).unwrap();
        let pred = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 4 < 2 && i / 4 < 2 { 1.0 } else { 0.0 }).collect()).unwrap();
        let f = f_measure(&pred, &gt, DEFAULT_BETA2).unwrap();
        assert_eq!(f.threshold, 0.5);
        assert_eq!((f.precision, f.recall), (1.0, 0.5));
        assert!((f.f - 1.3 * 0.5 / 0.8).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases() {
        let gt = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f_measure(&gt, &gt, 0.3).unwrap().f, 1.0);
        assert_eq!(f_measure(&Tensor::zeros(&[2, 2]), &gt, 0.3).unwrap().f, 0.0);
        assert!(f_measure(&gt, &Tensor::zeros(&[2, 2]), 0.3).is_err());
        assert_eq!(mae(&gt, &gt.map(|v| 1.0 - v)).unwrap(), 1.0);
        assert!(mae(&gt, &Tensor::zeros(&[4])).is_err());
    }
}
