//! Grouped segmentation reports and their CSV/JSON forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::mm3_to_ml;
use crate::io::CLASS_NAMES;

/// Label used for rows aggregated over vendors or classes.
pub const ALL: &str = "ALL";

/// Metrics of one predicted volume; arrays are indexed by class - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume: String,
    pub vendor: String,
    pub dice: Vec<f64>,
    pub avd_mm3: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub vendor: String,
    pub class: String,
    pub dice: f64,
    pub avd_mm3: f64,
    pub avd_ml: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationReport {
    /// One row per (vendor, class), vendors sorted, classes in label order.
    pub rows: Vec<ReportRow>,
    /// Per-class means over the vendor rows.
    pub class_means: Vec<ReportRow>,
    /// Mean over every (vendor, class) row.
    pub overall: ReportRow,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn row(vendor: &str, class: &str, dice: f64, avd_mm3: f64) -> ReportRow {
    ReportRow {
        vendor: vendor.to_string(),
        class: class.to_string(),
        dice,
        avd_mm3,
        avd_ml: mm3_to_ml(avd_mm3),
    }
}

fn class_name(i: usize) -> &'static str {
    CLASS_NAMES.get(i + 1).copied().unwrap_or("?")
}

pub fn build_report(entries: &[VolumeMetrics]) -> Result<SegmentationReport> {
    let first = entries
        .first()
        .ok_or_else(|| Error::Precondition("report needs at least one entry".into()))?;
    let classes = first.dice.len();
    if classes == 0 {
        return Err(Error::Precondition("entries carry no classes".into()));
    }
    if let Some(e) = entries
        .iter()
        .find(|e| e.dice.len() != classes || e.avd_mm3.len() != classes)
    {
        return Err(Error::Shape(format!("entry {} has a different class count", e.volume)));
    }
    let mut by_vendor: BTreeMap<&str, Vec<&VolumeMetrics>> = BTreeMap::new();
    for e in entries {
        by_vendor.entry(e.vendor.as_str()).or_default().push(e);
    }
    let mut rows = Vec::new();
    for (vendor, es) in &by_vendor {
        for c in 0..classes {
            rows.push(row(
                vendor,
                class_name(c),
                mean(es.iter().map(|e| e.dice[c])),
                mean(es.iter().map(|e| e.avd_mm3[c])),
            ));
        }
    }
    let class_means = (0..classes)
        .map(|c| {
            let rs = rows.iter().skip(c).step_by(classes);
            let dice = mean(rs.clone().map(|r| r.dice));
            let avd = mean(rs.map(|r| r.avd_mm3));
            row(ALL, class_name(c), dice, avd)
        })
        .collect();
    let overall = row(ALL, ALL, mean(rows.iter().map(|r| r.dice)), mean(rows.iter().map(|r| r.avd_mm3)));
    Ok(SegmentationReport {
        rows,
        class_means,
        overall,
    })
}

impl SegmentationReport {
    /// Vendor rows, then per-class means, then the overall mean.
    pub fn all_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().chain(&self.class_means).chain(std::iter::once(&self.overall))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in self.all_rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `vendor -> class -> {dice, avd_mm3, avd_ml}`.
    pub fn to_json(&self) -> Result<String> {
        let mut tree: BTreeMap<&str, BTreeMap<&str, serde_json::Value>> = BTreeMap::new();
        for r in self.all_rows() {
            tree.entry(&r.vendor).or_default().insert(
                &r.class,
                serde_json::json!({ "dice": r.dice, "avd_mm3": r.avd_mm3, "avd_ml": r.avd_ml }),
            );
        }
        let mut s = serde_json::to_string_pretty(&tree).map_err(|e| Error::json("report", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads back rows written by [`SegmentationReport::write_csv`].
pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
