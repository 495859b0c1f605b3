//! Evaluation metrics and report aggregation.
//!
//! Metrics clamp both images to `[0, 1]` first. PSNR is taken jointly over
//! all RGB channels. Identical images have infinite PSNR; such records are
//! kept but left out of the PSNR mean, with a warning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{list_images, load_image};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

fn clamped<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.clamp(T::zero(), T::one())
}

/// Mean squared error after clamping, accumulated in `f64`.
pub fn clamped_mse<T: Real>(s: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    s.expect_same_shape(y, "metrics")?;
    let sum: f64 = s
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64().clamp(0.0, 1.0) - b.as_f64().clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(sum / s.len() as f64)
}

/// `10·log10(1 / mse)` in decibels; `+inf` when the images are identical.
pub fn psnr<T: Real>(s: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(clamped_mse(s, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// SSIM with default constants and `L = 1` on clamped inputs.
pub fn ssim_metric<T: Real>(s: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ssim_metric_with(s, y, &LossConfig::default())
}

pub fn ssim_metric_with<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(losses::ssim(&clamped(s), &clamped(y), cfg)?.as_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// 1 for the coarse output, 2 for the final output, 0 for the
    /// unprocessed input as a baseline.
    pub stage: u8,
    /// `null` in JSON when infinite (identical images).
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub niqe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sseq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAggregate {
    pub stage: u8,
    pub count: usize,
    /// Mean over the finite PSNR values; `None` when there are none.
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: f64,
    pub infinite_psnr: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn score<T: Real>(&mut self, id: &str, stage: u8, s: &Tensor<T>, y: &Tensor<T>) -> Result<&EvalRecord> {
        let record = EvalRecord {
            id: id.to_string(),
            stage,
            psnr_db: psnr(s, y)?,
            ssim: ssim_metric(s, y)?,
            niqe: None,
            sseq: None,
        };
        if record.psnr_db.is_infinite() {
            self.warnings.push(format!(
                "{id} (stage {stage}): identical to ground truth, PSNR infinite and excluded from the mean"
            ));
        }
        self.records.push(record);
        Ok(self.records.last().unwrap())
    }

    /// One aggregate per stage, ascending.
    pub fn aggregates(&self) -> Vec<StageAggregate> {
        let mut by_stage: BTreeMap<u8, Vec<&EvalRecord>> = BTreeMap::new();
        for r in &self.records {
            by_stage.entry(r.stage).or_default().push(r);
        }
        by_stage
            .into_iter()
            .map(|(stage, rs)| {
                let finite: Vec<f64> = rs.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
                StageAggregate {
                    stage,
                    count: rs.len(),
                    mean_psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
                    mean_ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / rs.len() as f64,
                    infinite_psnr: rs.len() - finite.len(),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, stage: u8) -> Option<StageAggregate> {
        self.aggregates().into_iter().find(|a| a.stage == stage)
    }

    /// Line-delimited JSON: one `record` line per image, one `aggregate`
    /// line per stage, one `warning` line per warning.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "type", rename_all = "snake_case")]
        enum Line<'a> {
            Record(&'a EvalRecord),
            Aggregate(&'a StageAggregate),
            Warning { message: &'a str },
        }
        let aggregates = self.aggregates();
        let lines = self
            .records
            .iter()
            .map(Line::Record)
            .chain(aggregates.iter().map(Line::Aggregate))
            .chain(self.warnings.iter().map(|w| Line::Warning { message: w }));
        let mut out = String::new();
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("report lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from("id,stage,psnr_db,ssim\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", csv_field(&r.id), r.stage, fmt_db(r.psnr_db), r.ssim);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("stage,count,mean_psnr_db,mean_ssim,infinite_psnr\n");
        for a in self.aggregates() {
            let psnr = a.mean_psnr_db.map(fmt_db).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", a.stage, a.count, psnr, a.mean_ssim, a.infinite_psnr);
        }
        out
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores every prediction against the ground-truth file of the same name
/// (stage 2). Unmatched names become warnings; undecodable images fail.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let gt_names: BTreeMap<String, &Path> = gts.iter().map(|p| (name(p), p.as_path())).collect();
    let pred_names: BTreeMap<String, &Path> = preds.iter().map(|p| (name(p), p.as_path())).collect();

    let mut report = EvalReport::default();
    for (file, pred) in &pred_names {
        match gt_names.get(file) {
            Some(gt) => {
                let s = load_image::<f64>(pred)?;
                let y = load_image::<f64>(gt)?;
                if s.shape() != y.shape() {
                    report
                        .warnings
                        .push(format!("{file}: size {:?} differs from ground truth {:?}, skipped", s.shape(), y.shape()));
                    continue;
                }
                let id = Path::new(file).file_stem().unwrap().to_string_lossy().into_owned();
                report.score(&id, 2, &s, &y)?;
            }
            None => report.warnings.push(format!("{file}: no ground truth in {}", gt_dir.display())),
        }
    }
    for file in gt_names.keys().filter(|f| !pred_names.contains_key(*f)) {
        report.warnings.push(format!("{file}: no prediction in {}", pred_dir.display()));
    }
    if report.records.is_empty() {
        report.warnings.push("no matching filenames between the two directories".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_gives_twenty_db() {
        let y = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        let s = y.map(|v| v + 0.1);
        assert!((psnr(&s, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn identical_images_are_infinite_and_excluded() {
        let y = Tensor::<f64>::full(&[1, 3, 16, 16], 0.3);
        let s = y.map(|v| v + 0.1);
        let mut report = EvalReport::default();
        report.score("a", 2, &y, &y).unwrap();
        report.score("b", 2, &s, &y).unwrap();
        let agg = report.aggregate(2).unwrap();
        assert_eq!(agg.count, 2);
        assert_eq!(agg.infinite_psnr, 1);
        assert!((agg.mean_psnr_db.unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.records_csv().contains("a,2,inf,1"));
    }

    #[test]
    fn jsonl_has_record_and_aggregate_lines() {
        let y = Tensor::<f64>::full(&[1, 3, 16, 16], 0.3);
        let mut report = EvalReport::default();
        report.score("x", 1, &y.map(|v| v * 0.5), &y).unwrap();
        let text = report.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["type"], "record");
        assert_eq!(lines[1]["type"], "aggregate");
        assert_eq!(lines[1]["count"], 1);
    }

    #[test]
    fn csv_quotes_awkward_ids() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
