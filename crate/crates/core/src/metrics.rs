//! Saliency evaluation: IoU-based success rate, average precision,
//! F-measure and mean absolute error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// `beta^2` of the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// An attack on an image succeeds when IoU falls below this.
pub const SUCCESS_IOU: f64 = 0.5;
/// Cap of the adaptive binarisation threshold.
pub const THRESHOLD_CAP: f64 = 0.95;

/// Single-channel map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a {height}x{width} map", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidImage(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn check_shape(&self, gt: &BinaryMask) -> Result<()> {
        if !gt.same_shape(self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "map {}x{} vs mask {}x{}",
                self.height,
                self.width,
                gt.height(),
                gt.width()
            )));
        }
        Ok(())
    }
}

/// `min(2 * mean, 0.95)`.
pub fn adaptive_threshold(map: &SaliencyMap) -> f64 {
    (2.0 * map.mean()).min(THRESHOLD_CAP)
}

/// Pixels strictly above the adaptive threshold.
pub fn binarize(map: &SaliencyMap) -> BinaryMask {
    let t = adaptive_threshold(map);
    BinaryMask::from_fn(map.height, map.width, |r, c| map.data[r * map.width + c] > t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iou: f64,
    pub success: bool,
    pub ap: f64,
    pub f_beta: f64,
    pub mae: f64,
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_shape(gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch("iou: masks differ in shape".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of records whose IoU is below [`SUCCESS_IOU`].
pub fn success_rate(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("success rate over no records"));
    }
    Ok(records.iter().filter(|r| r.iou < SUCCESS_IOU).count() as f64 / records.len() as f64)
}

/// Area under the precision-recall curve from 256 thresholds `k/255`
/// (pixel positive when `value >= k/255`), trapezoidal, starting from
/// `(recall 0, precision at the highest threshold)`. Precision is 1 when
/// nothing is predicted positive.
pub fn average_precision(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    pred.check_shape(gt)?;
    let positives = gt.count();
    if positives == 0 {
        return Err(Error::Empty("average precision needs a non-empty ground truth"));
    }
    // per-pixel highest threshold index it clears, histogrammed
    let mut hist_all = [0usize; 256];
    let mut hist_tp = [0usize; 256];
    for (&v, &g) in pred.data.iter().zip(gt.data()) {
        let mut k = ((v * 255.0).floor() as usize).min(255);
        while k < 255 && v >= (k + 1) as f64 / 255.0 {
            k += 1;
        }
        while k > 0 && v < k as f64 / 255.0 {
            k -= 1;
        }
        hist_all[k] += 1;
        hist_tp[k] += g as usize;
    }
    let (mut pp, mut tp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(257);
    for k in (0..256).rev() {
        pp += hist_all[k];
        tp += hist_tp[k];
        let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
        curve.push((tp as f64 / positives as f64, precision));
    }
    // recall is non-decreasing as the threshold falls
    let mut prev = (0.0, curve[0].1);
    let mut area = 0.0;
    for &(r, p) in &curve {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}

/// F-measure of the adaptively binarised map; 0 when precision and recall
/// are both 0.
pub fn f_beta(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    pred.check_shape(gt)?;
    let positives = gt.count();
    if positives == 0 {
        return Err(Error::Empty("F-measure needs a non-empty ground truth"));
    }
    let bin = binarize(pred);
    let pp = bin.count();
    let tp = bin.data().iter().zip(gt.data()).filter(|&(&p, &g)| p == 1 && g == 1).count();
    let precision = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
    let recall = tp as f64 / positives as f64;
    Ok(f_measure(precision, recall))
}

pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall)
    }
}

pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    pred.check_shape(gt)?;
    let sum: f64 = pred.data.iter().zip(gt.data()).map(|(&p, &g)| (p - g as f64).abs()).sum();
    Ok(sum / pred.data.len() as f64)
}

/// All four metrics for one detector output.
pub fn evaluate(pred: &SaliencyMap, gt: &BinaryMask) -> Result<EvalRecord> {
    let iou = iou(&binarize(pred), gt)?;
    Ok(EvalRecord {
        iou,
        success: iou < SUCCESS_IOU,
        ap: average_precision(pred, gt)?,
        f_beta: f_beta(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

/// Means over records, keyed like the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "S")]
    pub success_rate: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "F_beta")]
    pub f_beta: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Aggregate> {
    let n = records.len() as f64;
    Ok(Aggregate {
        success_rate: success_rate(records)?,
        ap: records.iter().map(|r| r.ap).sum::<f64>() / n,
        f_beta: records.iter().map(|r| r.f_beta).sum::<f64>() / n,
        mae: records.iter().map(|r| r.mae).sum::<f64>() / n,
    })
}

pub const CSV_HEADER: &str = "image,iou,success,ap,f_beta,mae";

/// Per-image rows as CSV with [`CSV_HEADER`].
pub fn records_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalRecord)>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out += &format!("{},{},{},{},{},{}\n", csv_field(name), r.iou, r.success, r.ap, r.f_beta, r.mae);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
