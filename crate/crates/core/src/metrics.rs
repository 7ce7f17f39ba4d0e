//! Localization and detection metrics, and the average-fusion baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("prediction has {a} values, ground truth {b}")));
    }
    Ok(())
}

/// F1 of the positive class after thresholding at `threshold` (`>=`).
/// Both masks empty counts as a perfect score.
pub fn pixel_f1(pred: &[f32], gt: &[bool], threshold: f32) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Mann-Whitney AUC with midranks for ties. `None` unless both classes occur.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    same_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos as f64 * neg as f64)))
}

/// Largest F1 over thresholds at every distinct prediction value.
pub fn best_threshold_f1(pred: &[f32], gt: &[bool]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let total_pos = gt.iter().filter(|&&g| g).count();
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    // threshold above every value: nothing predicted
    let mut best = f1_from_counts(0, 0, total_pos);
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let v = pred[order[i]];
        while i < order.len() && pred[order[i]] == v {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        best = best.max(f1_from_counts(tp, fp, total_pos - tp));
    }
    Ok(best)
}

/// Pixel-wise mean of single-channel maps.
pub fn avg_fusion(signals: &[&[f32]]) -> Result<Vec<f32>> {
    let first = signals.first().ok_or_else(|| Error::Input("average fusion needs at least one signal".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for (i, s) in signals.iter().enumerate() {
        if s.len() != first.len() {
            return Err(Error::Dimension(format!("signal {i} has {} values, expected {}", s.len(), first.len())));
        }
        for (a, &v) in acc.iter_mut().zip(s.iter()) {
            *a += v as f64;
        }
    }
    let n = signals.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub det_label: bool,
    pub det_score: f64,
    pub pixel_f1: f64,
    pub pixel_f1_best: f64,
    pub pixel_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub pixel_f1: f64,
    pub pixel_f1_best_threshold: f64,
    /// Mean of per-image AUCs over images containing both classes.
    pub pixel_auc: Option<f64>,
    pub image_f1: f64,
    pub image_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Per dataset, in input order.
    pub datasets: Vec<(String, Summary)>,
    /// Unweighted mean over datasets.
    pub overall: Summary,
    pub rows: Vec<(String, SampleScore)>,
}

/// Scores one localization map.
pub fn score_sample(id: impl Into<String>, loc: &[f32], gt: &[bool], det_score: f64) -> Result<SampleScore> {
    let f1 = pixel_f1(loc, gt, 0.5)?;
    let best = best_threshold_f1(loc, gt)?;
    let scores: Vec<f64> = loc.iter().map(|&v| v as f64).collect();
    Ok(SampleScore {
        id: id.into(),
        det_label: gt.iter().any(|&g| g),
        det_score,
        pixel_f1: f1,
        pixel_f1_best: best,
        pixel_auc: auc(&scores, gt)?,
    })
}

pub fn summarize(rows: &[SampleScore]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Input("cannot summarize an empty dataset".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&SampleScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.pixel_auc).collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in rows {
        match (r.det_score >= 0.5, r.det_label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let det_scores: Vec<f64> = rows.iter().map(|r| r.det_score).collect();
    let det_labels: Vec<bool> = rows.iter().map(|r| r.det_label).collect();
    Ok(Summary {
        samples: rows.len(),
        pixel_f1: mean(&|r| r.pixel_f1),
        pixel_f1_best_threshold: mean(&|r| r.pixel_f1_best),
        pixel_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        image_f1: f1_from_counts(tp, fp, fn_),
        image_auc: auc(&det_scores, &det_labels)?,
    })
}

impl EvalReport {
    /// Builds a report from per-dataset rows.
    pub fn new(method: impl Into<String>, per_dataset: Vec<(String, Vec<SampleScore>)>) -> Result<Self> {
        if per_dataset.is_empty() {
            return Err(Error::Input("no datasets to evaluate".into()));
        }
        let mut datasets = Vec::new();
        let mut rows = Vec::new();
        for (name, r) in per_dataset {
            datasets.push((name.clone(), summarize(&r)?));
            rows.extend(r.into_iter().map(|s| (name.clone(), s)));
        }
        let k = datasets.len() as f64;
        let avg = |f: &dyn Fn(&Summary) -> f64| datasets.iter().map(|(_, s)| f(s)).sum::<f64>() / k;
        let avg_opt = |f: &dyn Fn(&Summary) -> Option<f64>| {
            let v: Vec<f64> = datasets.iter().filter_map(|(_, s)| f(s)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let overall = Summary {
            samples: datasets.iter().map(|(_, s)| s.samples).sum(),
            pixel_f1: avg(&|s| s.pixel_f1),
            pixel_f1_best_threshold: avg(&|s| s.pixel_f1_best_threshold),
            pixel_auc: avg_opt(&|s| s.pixel_auc),
            image_f1: avg(&|s| s.image_f1),
            image_auc: avg_opt(&|s| s.image_auc),
        };
        Ok(EvalReport { method: method.into(), datasets, overall, rows })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("dataset,id,det_label,det_score,pixel_f1,pixel_f1_best,pixel_auc\n");
        for (d, r) in &self.rows {
            s.push_str(&format!(
                "{d},{},{},{:.6},{:.6},{:.6},{}\n",
                r.id,
                u8::from(r.det_label),
                r.det_score,
                r.pixel_f1,
                r.pixel_f1_best,
                opt(r.pixel_auc)
            ));
        }
        s
    }

    /// Aggregates only; per-sample rows go to the CSV.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Agg<'a> {
            method: &'a str,
            datasets: &'a [(String, Summary)],
            overall: &'a Summary,
        }
        Ok(serde_json::to_string_pretty(&Agg { method: &self.method, datasets: &self.datasets, overall: &self.overall })?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_edge_cases() {
        let gt = [true, false, true, false];
        assert_eq!(pixel_f1(&[1.0, 0.0, 1.0, 0.0], &gt, 0.5).unwrap(), 1.0);
        assert_eq!(pixel_f1(&[0.0; 4], &gt, 0.5).unwrap(), 0.0);
        assert_eq!(pixel_f1(&[0.0; 4], &[false; 4], 0.5).unwrap(), 1.0);
        assert!(pixel_f1(&[0.0; 3], &gt, 0.5).is_err());
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, true, false]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.5; 2], &[true, true]).unwrap(), None);
    }

    #[test]
    fn best_threshold_sees_scaled_masks() {
        let gt = [true, true, false, false];
        let pred: Vec<f32> = gt.iter().map(|&g| if g { 0.3 } else { 0.0 }).collect();
        assert_eq!(best_threshold_f1(&pred, &gt).unwrap(), 1.0);
        assert_eq!(pixel_f1(&pred, &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn average_fusion() {
        let a = [0.2f32; 3];
        let b = [0.8f32; 3];
        assert_eq!(avg_fusion(&[&a, &b]).unwrap(), vec![0.5; 3]);
        assert_eq!(avg_fusion(&[&a]).unwrap(), a.to_vec());
        assert!(avg_fusion(&[]).is_err());
    }
}
