//! Multi-label scores and embedding separation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard decision per logit; exactly zero decides 0.
pub fn classify(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&x| u8::from(x > 0.0)).collect()
}

fn shape(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<(usize, usize)> {
    if pred.len() != y.len() {
        return Err(Error::domain(format!("{} predictions for {} targets", pred.len(), y.len())));
    }
    let width = y.first().map_or(0, Vec::len);
    if pred.iter().chain(y).any(|r| r.len() != width) {
        return Err(Error::domain("label rows differ in width"));
    }
    Ok((y.len(), width))
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Share of rows predicted exactly, in percent.
pub fn subset_accuracy(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<f64> {
    let (n, _) = shape(pred, y)?;
    Ok(pct(pred.iter().zip(y).filter(|(p, t)| p == t).count(), n))
}

/// Share of mislabeled cells, in percent.
pub fn hamming_distance(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<f64> {
    let (n, l) = shape(pred, y)?;
    let wrong = pred
        .iter()
        .zip(y)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a != b).count())
        .sum();
    Ok(pct(wrong, n * l))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn f1(self) -> f64 {
        pct(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn label_counts(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<Vec<Counts>> {
    let (_, l) = shape(pred, y)?;
    let mut c = vec![Counts::default(); l];
    for (p, t) in pred.iter().zip(y) {
        for (j, (&a, &b)) in p.iter().zip(t).enumerate() {
            match (a != 0, b != 0) {
                (true, true) => c[j].tp += 1,
                (true, false) => c[j].fp += 1,
                (false, true) => c[j].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// F1 over pooled counts of all cells, in percent.
pub fn micro_f1(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<f64> {
    let total = label_counts(pred, y)?.into_iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok(total.f1())
}

/// Per-label F1 in percent; a label never predicted nor present scores 0.
pub fn per_label_f1(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<Vec<f64>> {
    Ok(label_counts(pred, y)?.into_iter().map(Counts::f1).collect())
}

/// Unweighted mean of the per-label F1 over every label.
pub fn macro_f1(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<f64> {
    let f = per_label_f1(pred, y)?;
    if f.is_empty() {
        return Ok(0.0);
    }
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset_acc: f64,
    pub hamming_dist: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_label_f1: Vec<f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn compute(pred: &[Vec<u8>], y: &[Vec<u8>]) -> Result<Self> {
        Ok(Self {
            subset_acc: subset_accuracy(pred, y)?,
            hamming_dist: hamming_distance(pred, y)?,
            macro_f1: macro_f1(pred, y)?,
            micro_f1: micro_f1(pred, y)?,
            per_label_f1: per_label_f1(pred, y)?,
            n_samples: y.len(),
        })
    }

    pub fn from_logits(logits: &[Vec<f64>], y: &[Vec<u8>]) -> Result<Self> {
        let pred: Vec<Vec<u8>> = logits.iter().map(|l| classify(l)).collect();
        Self::compute(&pred, y)
    }

    /// `name,value` pairs for the four headline metrics.
    pub fn headline(&self) -> [(&'static str, f64); 4] {
        [
            ("subset_acc", self.subset_acc),
            ("hamming", self.hamming_dist),
            ("macro_f1", self.macro_f1),
            ("micro_f1", self.micro_f1),
        ]
    }

    /// One `arm,metric,value` CSV row per headline metric.
    pub fn csv_rows(&self, arm: &str) -> Vec<String> {
        self.headline()
            .iter()
            .map(|(m, v)| format!("{arm},{m},{v:.6}"))
            .collect()
    }
}

/// Projects rows onto the two leading principal axes. Axis signs are fixed
/// so that the largest-magnitude loading of each axis is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::domain(format!("PCA needs >= 2 rows of equal width >= 2 ({n} rows)")));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(r, v)| r * v).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

/// Mean distance between points of different classes over mean distance
/// between points of the same class. Both means run over ordered pairs; the
/// same-class mean includes each point paired with itself.
pub fn separation_ratio(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::domain("one label per point required"));
    }
    let mut sizes = std::collections::BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    if sizes.len() < 2 || sizes.values().any(|&c| c < 2) {
        return Err(Error::domain(format!("need >= 2 classes of >= 2 points, got sizes {sizes:?}")));
    }
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let (inter, intra) = (inter / n_inter as f64, intra / n_intra as f64);
    if !(intra > 0.0) {
        return Err(Error::domain("all same-class points coincide"));
    }
    Ok(inter / intra)
}
