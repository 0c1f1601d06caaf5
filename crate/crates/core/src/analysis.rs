//! Diagnostics on trained bases and decoder output: approximate
//! diagonalization, basis angles, electrode importance, top-k accuracy and
//! articulatory-group collapse of confusion matrices.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{lstsq, orthogonality_error, SymMatrix};
use crate::vocab::{CONSONANTS, VOWELS};

pub const BASIS_TOL: f64 = 1e-6;

/// Square orthogonal matrix, typically a snapshot of a trained first BiMap.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    q: DMatrix<f64>,
}

impl BasisMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.is_empty() {
            return Err(invalid(format!("basis must be square, got {}x{}", q.nrows(), q.ncols())));
        }
        let err = orthogonality_error(&q);
        if !(err <= BASIS_TOL) {
            return Err(invalid(format!("basis is not orthogonal: ‖QᵀQ − I‖∞ = {err:e}")));
        }
        Ok(Self { q })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `QᵀEQ`.
    pub fn rotate(&self, e: &SymMatrix) -> Result<SymMatrix> {
        if e.dim() != self.dim() {
            return Err(invalid(format!("basis dim {} vs matrix dim {}", self.dim(), e.dim())));
        }
        e.congruence(&self.q)
    }
}

/// Position of `label` when the row is sorted by descending score, ties
/// going to the lower class index.
fn rank_of(row: &[f64], label: usize) -> usize {
    let s = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < label)).count()
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn topk_accuracy(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if rows.len() != labels.len() {
        return Err(invalid(format!("{} score rows for {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(invalid("topk_accuracy needs at least one row"));
    }
    let classes = rows[0].len();
    if rows.iter().any(|r| r.len() != classes) {
        return Err(invalid("score rows differ in length"));
    }
    if k == 0 || k > classes {
        return Err(invalid(format!("k must lie in 1..={classes}, got {k}")));
    }
    let mut hits = 0;
    for (row, &label) in rows.iter().zip(labels) {
        if label >= classes {
            return Err(invalid(format!("label {label} outside {classes} classes")));
        }
        if rank_of(row, label) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Top-1 through top-`max_k` accuracies.
pub fn topk_table(rows: &[Vec<f64>], labels: &[usize], max_k: usize) -> Result<Vec<f64>> {
    (1..=max_k).map(|k| topk_accuracy(rows, labels, k)).collect()
}

/// `max_{i≠j} |M_ij| / max_i |M_ii|` for `M = QᵀEQ`.
pub fn diag_ratio(e: &SymMatrix, q: &BasisMatrix) -> Result<f64> {
    let m = q.rotate(e)?;
    let d = m.dim();
    let mut off: f64 = 0.0;
    let mut diag: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = m.get(i, j).abs();
            if i == j {
                diag = diag.max(v);
            } else {
                off = off.max(v);
            }
        }
    }
    if diag == 0.0 {
        return Err(Error::DegenerateInput("rotated matrix has an all-zero diagonal".into()));
    }
    Ok(off / diag)
}

/// Angle between two bases under the Frobenius inner product, in `[0, π]`.
pub fn basis_angle(qi: &BasisMatrix, qj: &BasisMatrix) -> Result<f64> {
    if qi.dim() != qj.dim() {
        return Err(invalid(format!("basis dims differ: {} vs {}", qi.dim(), qj.dim())));
    }
    let (a, b) = (qi.matrix(), qj.matrix());
    let c = a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
    Ok(c.clamp(-1.0, 1.0).acos())
}

/// Node indices sorted by `|κ|` descending, lower index first on ties.
pub fn rank_by_magnitude(kappa: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..kappa.len()).collect();
    idx.sort_by(|&a, &b| kappa[b].abs().total_cmp(&kappa[a].abs()).then(a.cmp(&b)));
    idx
}

/// How the column of `Q` with the dominant rotated diagonal is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnSelection {
    /// One column for all trials, from the arithmetic mean of the edges.
    #[default]
    MeanEdge,
    /// Each trial picks its own column.
    PerTrial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialImportance {
    pub column: usize,
    pub kappa: Vec<f64>,
    /// Node indices, most important first.
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub trials: Vec<TrialImportance>,
    /// Per node, how many trials rank it first.
    pub rank1_counts: Vec<usize>,
    /// Per node, how many trials rank it in the top three.
    pub top3_counts: Vec<usize>,
}

impl ImportanceReport {
    /// Nodes that reached rank 1 with their counts, largest first.
    pub fn rank1_frequencies(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> =
            self.rank1_counts.iter().copied().enumerate().filter(|&(_, c)| c > 0).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

fn dominant_column(m: &SymMatrix) -> usize {
    let mut best = 0;
    for i in 1..m.dim() {
        if m.get(i, i) > m.get(best, best) {
            best = i;
        }
    }
    best
}

/// For each edge matrix `E`, solve `E·κ ≈ w` in the least-squares sense with
/// `w` the dominant column of `Q`, rank the nodes by `|κ|` and tally.
pub fn electrode_importance(
    edges: &[SymMatrix],
    q: &BasisMatrix,
    selection: ColumnSelection,
) -> Result<ImportanceReport> {
    if edges.is_empty() {
        return Err(invalid("electrode_importance needs at least one trial"));
    }
    let d = q.dim();
    if let Some(e) = edges.iter().find(|e| e.dim() != d) {
        return Err(invalid(format!("edge dim {} vs basis dim {d}", e.dim())));
    }
    let shared = match selection {
        ColumnSelection::MeanEdge => {
            let mut sum = DMatrix::zeros(d, d);
            for e in edges {
                sum += e.matrix();
            }
            let mean = SymMatrix::new(sum / edges.len() as f64)?;
            Some(dominant_column(&q.rotate(&mean)?))
        }
        ColumnSelection::PerTrial => None,
    };
    let mut trials = Vec::with_capacity(edges.len());
    let mut rank1_counts = vec![0; d];
    let mut top3_counts = vec![0; d];
    for e in edges {
        let column = match shared {
            Some(c) => c,
            None => dominant_column(&q.rotate(e)?),
        };
        let w = q.matrix().column(column).into_owned();
        let kappa = lstsq(e.matrix(), &w)?;
        let ranking = rank_by_magnitude(&kappa);
        rank1_counts[ranking[0]] += 1;
        for &n in ranking.iter().take(3) {
            top3_counts[n] += 1;
        }
        trials.push(TrialImportance { column, kappa: kappa.as_slice().to_vec(), ranking });
    }
    Ok(ImportanceReport { trials, rank1_counts, top3_counts })
}

/// Partition of a label set into named groups. Labels listed as singletons
/// are known but only ever match themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeGroups {
    pub groups: Vec<(String, Vec<String>)>,
    pub singletons: Vec<String>,
}

impl PhonemeGroups {
    pub fn new(groups: Vec<(String, Vec<String>)>, singletons: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for label in groups.iter().flat_map(|(_, m)| m.iter()).chain(singletons.iter()) {
            if !seen.insert(label.as_str()) {
                return Err(invalid(format!("label {label:?} appears in more than one group")));
            }
        }
        Ok(Self { groups, singletons })
    }

    /// Place-of-articulation consonant groups; vowels as singletons.
    pub fn articulatory() -> Self {
        let g = |name: &str, members: &[&str]| {
            (name.to_string(), members.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        };
        let groups = vec![
            g("bilabial", &["Baa", "Paa", "Maa"]),
            g("labiodental", &["Faa", "Vaa"]),
            g("dental", &["Thaa", "Dhaa"]),
            g("alveolar", &["Taa", "Daa", "Naa", "Saa", "Zaa"]),
            g("post-velar", &["Chaa", "Shaa", "Jhaa", "Zhaa"]),
            g("velar", &["Kaa", "Gaa", "NGaa"]),
            g("approximant", &["Yaa", "Raa", "Laa", "Waa"]),
        ];
        Self::new(groups, VOWELS.iter().map(|s| s.to_string()).collect()).expect("disjoint")
    }

    /// Every label in its own group.
    pub fn singleton_groups(labels: &[String]) -> Result<Self> {
        Self::new(Vec::new(), labels.to_vec())
    }

    /// Group key of `label`: the group name, or the label itself for a
    /// singleton.
    pub fn group_of(&self, label: &str) -> Option<String> {
        for (name, members) in &self.groups {
            if members.iter().any(|m| m == label) {
                return Some(name.clone());
            }
        }
        self.singletons.iter().find(|s| *s == label).cloned().map(|s| format!("={s}"))
    }

    pub fn consonant_labels() -> Vec<String> {
        CONSONANTS.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub raw_accuracy: f64,
    pub collapsed_accuracy: f64,
    pub errors: u64,
    pub within_group_errors: u64,
}

/// Accuracy of a confusion matrix (rows true, columns predicted) when
/// confusions inside one group count as correct.
pub fn group_collapse(confusion: &[Vec<u64>], labels: &[String], groups: &PhonemeGroups) -> Result<CollapseReport> {
    let m = labels.len();
    if confusion.len() != m || confusion.iter().any(|r| r.len() != m) {
        return Err(invalid(format!("confusion matrix must be {m}x{m}")));
    }
    let keys = labels
        .iter()
        .map(|l| groups.group_of(l).ok_or_else(|| invalid(format!("label {l:?} is not covered by the groups"))))
        .collect::<Result<Vec<_>>>()?;
    let mut index: HashMap<&str, usize> = HashMap::new();
    for l in labels {
        if index.insert(l.as_str(), 0).is_some() {
            return Err(invalid(format!("duplicate label {l:?}")));
        }
    }
    let (mut total, mut correct, mut within) = (0u64, 0u64, 0u64);
    for (i, row) in confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            total += c;
            if i == j {
                correct += c;
            } else if keys[i] == keys[j] {
                within += c;
            }
        }
    }
    if total == 0 {
        return Err(Error::DegenerateInput("confusion matrix is empty".into()));
    }
    Ok(CollapseReport {
        raw_accuracy: correct as f64 / total as f64,
        collapsed_accuracy: (correct + within) as f64 / total as f64,
        errors: total - correct,
        within_group_errors: within,
    })
}
