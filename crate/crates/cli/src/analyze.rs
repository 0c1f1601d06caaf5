//! Weight and confusion diagnostics over trained checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spdsemg::analysis::{
    basis_angle, diag_ratio, electrode_importance, group_collapse, BasisMatrix, CollapseReport, ColumnSelection,
    ImportanceReport, PhonemeGroups,
};

use crate::error::{CliError, CliResult};
use crate::pipeline::{Checkpoint, Dataset, MetricsReport};

/// The first BiMap weight as a square basis.
pub fn basis_of(ck: &Checkpoint) -> CliResult<BasisMatrix> {
    let w = ck.first_bimap()?;
    if w.rows() != w.cols() {
        return Err(CliError::Config(format!(
            "first BiMap is {}×{}; a square layer is needed for basis analyses",
            w.rows(),
            w.cols()
        )));
    }
    Ok(BasisMatrix::new(w.matrix().clone())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRatioRow {
    pub trial: usize,
    pub window: usize,
    pub label: String,
    pub session: String,
    pub repetition: usize,
    pub ratio: f64,
}

pub fn diag_ratios(q: &BasisMatrix, data: &Dataset) -> CliResult<Vec<DiagRatioRow>> {
    let mut rows = Vec::new();
    for (trial, t) in data.trials.iter().enumerate() {
        for (window, e) in t.windows.iter().enumerate() {
            rows.push(DiagRatioRow {
                trial,
                window,
                label: t.label.clone(),
                session: t.session.clone(),
                repetition: t.repetition,
                ratio: diag_ratio(e, q)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub first: String,
    pub second: String,
    pub angle_rad: f64,
}

/// Angle between every unordered pair of bases.
pub fn basis_angles(named: &[(String, BasisMatrix)]) -> CliResult<Vec<AngleRow>> {
    let mut rows = Vec::new();
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            rows.push(AngleRow {
                first: named[i].0.clone(),
                second: named[j].0.clone(),
                angle_rad: basis_angle(&named[i].1, &named[j].1)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub item: usize,
    pub trial: usize,
    pub window: usize,
    pub label: String,
    pub column: usize,
    pub node: usize,
    pub kappa: f64,
    /// 1 for the largest `|κ|`.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCountRow {
    pub node: usize,
    pub rank1: usize,
    pub top3: usize,
}

/// Electrode importance over every window; returns the per-node rows and
/// the aggregated counts.
pub fn importance(
    q: &BasisMatrix,
    data: &Dataset,
    selection: ColumnSelection,
) -> CliResult<(ImportanceReport, Vec<ImportanceRow>, Vec<NodeCountRow>)> {
    let mut edges = Vec::new();
    let mut origin = Vec::new();
    for (trial, t) in data.trials.iter().enumerate() {
        for (window, e) in t.windows.iter().enumerate() {
            edges.push(e.clone());
            origin.push((trial, window));
        }
    }
    let report = electrode_importance(&edges, q, selection)?;
    let mut rows = Vec::new();
    for (item, (ti, &(trial, window))) in report.trials.iter().zip(&origin).enumerate() {
        let mut rank = vec![0; ti.ranking.len()];
        for (r, &node) in ti.ranking.iter().enumerate() {
            rank[node] = r + 1;
        }
        for (node, &kappa) in ti.kappa.iter().enumerate() {
            rows.push(ImportanceRow {
                item,
                trial,
                window,
                label: data.trials[trial].label.clone(),
                column: ti.column,
                node,
                kappa,
                rank: rank[node],
            });
        }
    }
    let counts = report
        .rank1_counts
        .iter()
        .zip(&report.top3_counts)
        .enumerate()
        .map(|(node, (&rank1, &top3))| NodeCountRow { node, rank1, top3 })
        .collect();
    Ok((report, rows, counts))
}

/// Collapsed accuracy of a metrics report under the articulatory consonant
/// groups, every other phoneme standing alone.
pub fn collapse(report: &MetricsReport) -> CliResult<CollapseReport> {
    if report.confusion.is_empty() {
        return Err(CliError::Config(format!("{} report has no confusion matrix", report.model)));
    }
    Ok(group_collapse(&report.confusion, &report.labels, &PhonemeGroups::articulatory())?)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}
