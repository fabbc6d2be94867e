use std::io::Write;

use crate::error::Result;

use super::MetricsReport;

pub fn write_report_json(report: &MetricsReport, w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(w, report)?;
    Ok(())
}

/// One row per evaluated class plus an `all` row with the class means.
pub fn write_report_csv(report: &MetricsReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "truths", "detections", "ap50", "ap50_95"])?;
    for c in &report.classes {
        out.write_record([
            c.class.to_string(),
            c.truths.to_string(),
            c.detections.to_string(),
            c.ap50().to_string(),
            c.ap50_95().to_string(),
        ])?;
    }
    out.write_record([
        "all".to_string(),
        report.classes.iter().map(|c| c.truths).sum::<usize>().to_string(),
        report.classes.iter().map(|c| c.detections).sum::<usize>().to_string(),
        report.map50.to_string(),
        report.map50_95.to_string(),
    ])?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Precision,
    Recall,
    F1,
}

/// A confidence-indexed curve: `threshold, class_<k>…, mean`.
pub fn write_curves_csv(report: &MetricsReport, curve: Curve, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["threshold".to_string()];
    header.extend(report.classes.iter().map(|c| format!("class_{}", c.class)));
    header.push("mean".into());
    out.write_record(&header)?;
    let mean = match curve {
        Curve::Precision => &report.mean_precision,
        Curve::Recall => &report.mean_recall,
        Curve::F1 => &report.mean_f1,
    };
    for (k, t) in report.confidence_grid.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for c in &report.classes {
            let v = match curve {
                Curve::Precision => c.precision[k],
                Curve::Recall => c.recall[k],
                Curve::F1 => c.f1[k],
            };
            row.push(v.to_string());
        }
        row.push(mean[k].to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Interpolated precision on a 101-point recall grid at IoU 0.5:
/// `recall, class_<k>…, mean`.
pub fn write_pr_csv(report: &MetricsReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["recall".to_string()];
    header.extend(report.classes.iter().map(|c| format!("class_{}", c.class)));
    header.push("mean".into());
    out.write_record(&header)?;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let vals: Vec<f64> = report
            .classes
            .iter()
            .map(|c| {
                c.pr_points
                    .iter()
                    .filter(|(rec, _)| *rec >= r)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .collect();
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let mut row = vec![r.to_string()];
        row.extend(vals.iter().map(|v| v.to_string()));
        row.push(mean.to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

