//! Evaluation summaries and their fixed-width table rendering.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{ApReport, ConfusionCounts, MetricsError, Prf};

/// Image-level statistics for one scene level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBreakdown {
    pub num_images: usize,
    pub confusion: ConfusionCounts,
    pub prf: Prf,
    pub box_ap: Option<ApReport>,
    pub mask_ap: Option<ApReport>,
}

/// Everything `evaluate` measures for one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label in comparison tables.
    pub label: String,
    pub dataset_digest: String,
    pub num_images: usize,
    pub score_threshold: f64,
    pub mask_threshold: f64,
    /// Absent when the split has no instances.
    pub box_ap: Option<ApReport>,
    pub mask_ap: Option<ApReport>,
    pub confusion: ConfusionCounts,
    pub prf: Prf,
    pub by_scene_level: BTreeMap<String, SceneBreakdown>,
}

const LABEL_WIDTH: usize = 24;

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:>7.1}"),
        None => format!("{:>7}", "-"),
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:>9.1}%", 100.0 * v),
        None => format!("{:>10}", "-"),
    }
}

fn ap_row(out: &mut String, label: &str, kind: &str, r: Option<&ApReport>) {
    let _ = write!(out, "{label:<LABEL_WIDTH$} {kind:<5}");
    let vals = match r {
        Some(r) => [Some(r.ap), Some(r.ap50), Some(r.ap75), r.ap_s, r.ap_m, r.ap_l],
        None => [None; 6],
    };
    for v in vals {
        out.push_str(&cell(v));
    }
    out.push('\n');
}

/// AP table (one row per report and variant) followed by the image-level
/// Accuracy / Recall / Precision table.
pub fn format_tables(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<LABEL_WIDTH$} {:<5}", "Method", "Type");
    for h in ["AP", "AP50", "AP75", "APS", "APM", "APL"] {
        let _ = write!(out, "{h:>7}");
    }
    out.push('\n');
    for r in reports {
        ap_row(&mut out, &r.label, "box", r.box_ap.as_ref());
        ap_row(&mut out, &r.label, "mask", r.mask_ap.as_ref());
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<LABEL_WIDTH$} {:>10}{:>10}{:>10}{:>8}{:>8}{:>8}{:>8}",
        "Method", "Accuracy", "Recall", "Precision", "TP", "FP", "FN", "TN"
    );
    for r in reports {
        let c = &r.confusion;
        let _ = writeln!(
            out,
            "{:<LABEL_WIDTH$} {}{}{}{:>8}{:>8}{:>8}{:>8}",
            r.label,
            pct(Some(r.prf.accuracy)),
            pct(r.prf.recall),
            pct(r.prf.precision),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        );
    }
    let scenes = reports.iter().any(|r| r.by_scene_level.keys().any(|k| k != "unknown"));
    if scenes {
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<LABEL_WIDTH$} {:<11}{:>7}{:>10}{:>10}{:>10}",
            "Method", "Scene", "Images", "Accuracy", "Recall", "Precision"
        );
        for r in reports {
            for (level, s) in &r.by_scene_level {
                let _ = writeln!(
                    out,
                    "{:<LABEL_WIDTH$} {:<11}{:>7}{}{}{}",
                    r.label,
                    level,
                    s.num_images,
                    pct(Some(s.prf.accuracy)),
                    pct(s.prf.recall),
                    pct(s.prf.precision)
                );
            }
        }
    }
    out
}

/// One row per evaluation output; refuses outputs over different datasets.
pub fn compare_report(reports: &[EvalReport]) -> Result<String, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    if let Some(other) = reports.iter().find(|r| r.dataset_digest != first.dataset_digest) {
        return Err(MetricsError::DigestMismatch(
            first.dataset_digest.clone(),
            other.dataset_digest.clone(),
        ));
    }
    Ok(format_tables(reports))
}
