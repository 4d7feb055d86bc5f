use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dice, dice10, hd95, paired_ttest, SegmentationMask};
use crate::phantom::DceStudy;
use crate::unet::{predict_mask, InferenceConfig, ModelParams};
use crate::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetrics>,
    pub mean_dice: f64,
    pub dice10: f64,
    /// mean over cases where HD95 is defined
    pub mean_hd95_mm: Option<f64>,
    pub hd95_undefined: usize,
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    pub fn from_cases(per_case: Vec<CaseMetrics>) -> Result<Self> {
        if per_case.is_empty() {
            return Err(Error::Metric("no cases to summarize".into()));
        }
        let scores: Vec<f64> = per_case.iter().map(|c| c.dice).collect();
        let defined: Vec<f64> = per_case.iter().filter_map(|c| c.hd95_mm).collect();
        Ok(Self {
            mean_dice: scores.iter().sum::<f64>() / scores.len() as f64,
            dice10: dice10(&scores)?,
            mean_hd95_mm: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            hd95_undefined: per_case.len() - defined.len(),
            per_case,
            comparisons: Vec::new(),
        })
    }

    /// Paired t-test on per-case Dice against `other`, matched by case id.
    pub fn compare_dice(&self, name_a: &str, other: &MetricsReport, name_b: &str) -> Result<Comparison> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for case in &self.per_case {
            let Some(o) = other.per_case.iter().find(|o| o.case_id == case.case_id) else {
                return Err(Error::Metric(format!("case {} missing from {name_b}", case.case_id)));
            };
            a.push(case.dice);
            b.push(o.dice);
        }
        if a.len() != other.per_case.len() {
            return Err(Error::Metric(format!("{name_a} and {name_b} cover different cases")));
        }
        let r = paired_ttest(&a, &b)?;
        Ok(Comparison {
            model_a: name_a.into(),
            model_b: name_b.into(),
            metric: "dice".into(),
            mean_a: a.iter().sum::<f64>() / a.len() as f64,
            mean_b: b.iter().sum::<f64>() / b.len() as f64,
            t: r.t,
            p: r.p,
            df: r.df,
            significant: r.significant(SIGNIFICANCE_LEVEL),
        })
    }
}

/// Score predicted masks against their references.
pub fn evaluate_predictions(cases: &[(String, SegmentationMask, SegmentationMask)]) -> Result<MetricsReport> {
    let per_case = cases
        .iter()
        .map(|(id, pred, truth)| {
            let d = dice(pred, truth)?;
            let h = if pred.is_empty() || truth.is_empty() {
                None
            } else {
                Some(hd95(pred, truth)?)
            };
            Ok(CaseMetrics {
                case_id: id.clone(),
                dice: d,
                hd95_mm: h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(per_case)
}

/// Predict and score every study; studies must carry a truth mask.
pub fn evaluate_model(model: &ModelParams, studies: &[DceStudy], cfg: &InferenceConfig) -> Result<MetricsReport> {
    let cases = studies
        .par_iter()
        .map(|s| {
            let truth = s
                .truth()
                .ok_or_else(|| Error::Data(format!("{}: no truth mask to evaluate against", s.case_id)))?;
            Ok((s.case_id.clone(), predict_mask(model, s, cfg)?, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&cases)
}

/// `case_id,dice,hd95_mm` rows at full precision; an undefined HD95 is an empty field.
/// Summary lines start with `#`.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("case_id,dice,hd95_mm\n");
    for c in &report.per_case {
        let h = c.hd95_mm.map(|h| h.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{h}", c.case_id, c.dice).unwrap();
    }
    writeln!(out, "# mean_dice,{:.6}", report.mean_dice).unwrap();
    writeln!(out, "# dice10,{:.6}", report.dice10).unwrap();
    let mean_h = report.mean_hd95_mm.map(|h| format!("{h:.6}")).unwrap_or_default();
    writeln!(out, "# mean_hd95_mm,{mean_h}").unwrap();
    writeln!(out, "# hd95_undefined,{}", report.hd95_undefined).unwrap();
    fs::write(path, out)?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CaseMetrics>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "case_id,dice,hd95_mm")) => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut cases = Vec::new();
    for (i, line) in lines {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, d, h] = fields[..] else {
            return Err(bad(i + 1, "expected 3 fields"));
        };
        let dice = d.parse().map_err(|_| bad(i + 1, "dice is not a number"))?;
        let hd95_mm = if h.is_empty() {
            None
        } else {
            Some(h.parse().map_err(|_| bad(i + 1, "hd95 is not a number"))?)
        };
        cases.push(CaseMetrics {
            case_id: id.into(),
            dice,
            hd95_mm,
        });
    }
    Ok(cases)
}

/// One row per comparison; `*` marks p < 0.05.
pub fn write_comparison_csv(path: &Path, comparisons: &[Comparison]) -> Result<()> {
    let mut out = String::from("model_a,model_b,metric,mean_a,mean_b,t,df,p,significant\n");
    for c in comparisons {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.4},{},{:.6},{}",
            c.model_a,
            c.model_b,
            c.metric,
            c.mean_a,
            c.mean_b,
            c.t,
            c.df,
            c.p,
            if c.significant { "*" } else { "" }
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}
