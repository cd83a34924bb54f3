//! Thresholding distance maps into change maps, confusion counting, and
//! precision / recall / F1 / overall accuracy.

use std::fmt;

use crate::error::{Error, Result};
use crate::losses::{DistanceMap, LabelMap};

/// Binary change decision per pixel, `1` = changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl ChangeMap {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width || mask.iter().any(|&v| v > 1) {
            return Err(Error::Contract(format!(
                "change map {height}×{width} must hold that many 0/1 entries"
            )));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn positives(&self) -> u64 {
        self.mask.iter().map(|&v| v as u64).sum()
    }

    pub fn positive_rate(&self) -> f64 {
        self.positives() as f64 / self.mask.len() as f64
    }
}

/// `1` where `d > t`.
pub fn threshold(d: &DistanceMap, t: f64) -> ChangeMap {
    let (height, width) = d.shape();
    ChangeMap {
        height,
        width,
        mask: d.values().iter().map(|&v| u8::from(v > t)).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), |mut acc, c| {
            acc.merge(&c);
            acc
        })
    }
}

pub fn confusion(pred: &ChangeMap, label: &LabelMap) -> Result<Confusion> {
    if pred.shape() != label.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs label {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &y) in pred.mask.iter().zip(label.data()) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and OA from counts. Any `0/0` evaluates to `0`.
pub fn metrics(counts: Confusion) -> MetricsReport {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        counts,
        precision,
        recall,
        f1,
        oa: ratio(counts.tp + counts.tn, counts.total()),
    }
}

impl MetricsReport {
    /// Single-line `key=value` record.
    pub fn record(&self) -> String {
        let c = self.counts;
        format!(
            "tp={} fp={} tn={} fn={} precision={:.6} recall={:.6} f1={:.6} oa={:.6}",
            c.tp, c.fp, c.tn, c.fn_, self.precision, self.recall, self.f1, self.oa
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.counts;
        writeln!(f, "{:<10} {:>12}", "metric", "value")?;
        writeln!(f, "{:<10} {:>12.4}", "precision", self.precision)?;
        writeln!(f, "{:<10} {:>12.4}", "recall", self.recall)?;
        writeln!(f, "{:<10} {:>12.4}", "f1", self.f1)?;
        writeln!(f, "{:<10} {:>12.4}", "oa", self.oa)?;
        write!(
            f,
            "{:<10} {:>12}\n{:<10} {:>12}\n{:<10} {:>12}\n{:<10} {:>12}",
            "tp", c.tp, "fp", c.fp, "tn", c.tn, "fn", c.fn_
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the highest F1 (first on ties).
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            "t", "precision", "recall", "f1", "oa"
        )?;
        for (i, row) in self.rows.iter().enumerate() {
            let r = &row.report;
            writeln!(
                f,
                "{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}{}",
                row.threshold,
                r.precision,
                r.recall,
                r.f1,
                r.oa,
                if i == self.best { "  *" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![lo],
        n => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Micro-averaged sweep over many `(distance, label)` pairs.
pub fn threshold_sweep_many(pairs: &[(DistanceMap, LabelMap)], grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Contract("threshold grid must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut counts = Confusion::default();
        for (d, y) in pairs {
            counts.merge(&confusion(&threshold(d, t), y)?);
        }
        rows.push(SweepRow {
            threshold: t,
            report: metrics(counts),
        });
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.report.f1 > rows[best].report.f1 {
            best = i;
        }
    }
    Ok(SweepTable { rows, best })
}

pub fn threshold_sweep(d: &DistanceMap, label: &LabelMap, grid: &[f64]) -> Result<SweepTable> {
    threshold_sweep_many(&[(d.clone(), label.clone())], grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Confusion {
        Confusion { tp, fp, tn, fn_ }
    }

    #[test]
    fn threshold_examples() {
        let d = DistanceMap::from_values(1, 4, vec![0.0, 0.5, 0.0, 2.0]).unwrap();
        assert_eq!(threshold(&d, 0.0).mask(), &[0, 1, 0, 1]);
        assert_eq!(threshold(&d, 2.0).positives(), 0);
        assert_eq!(threshold(&d, 7.0).positives(), 0);
    }

    #[test]
    fn confusion_examples() {
        let y = LabelMap::new(2, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        let same = ChangeMap::new(2, 3, y.data().to_vec()).unwrap();
        assert_eq!(confusion(&same, &y).unwrap(), counts(3, 0, 3, 0));
        let inv = ChangeMap::new(2, 3, y.data().iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion(&inv, &y).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let wrong = ChangeMap::new(3, 2, vec![0; 6]).unwrap();
        assert!(confusion(&wrong, &y).is_err());
    }

    #[test]
    fn metric_examples() {
        let r = metrics(counts(3, 1, 5, 1));
        assert_eq!((r.precision, r.recall, r.f1, r.oa), (0.75, 0.75, 0.75, 0.8));
        let r = metrics(counts(0, 0, 5, 3));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = metrics(counts(0, 2, 5, 0));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = metrics(counts(4, 0, 6, 0));
        assert_eq!((r.precision, r.recall, r.f1, r.oa), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn record_is_key_value() {
        let line = metrics(counts(3, 1, 5, 1)).record();
        assert!(line.starts_with("tp=3 fp=1 tn=5 fn=1 precision=0.750000"));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn sweep_on_label_valued_distances_is_perfect() {
        let y = LabelMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let d = DistanceMap::from_values(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = threshold_sweep(&d, &y, &[0.5]).unwrap();
        assert_eq!(t.best_row().report.f1, 1.0);
        assert!(threshold_sweep(&d, &y, &[]).is_err());
    }

    #[test]
    fn recall_and_positives_non_increasing_along_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d =
            DistanceMap::from_values(8, 8, (0..64).map(|_| rng.random_range(0.0..2.5)).collect())
                .unwrap();
        let y = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let table = threshold_sweep(&d, &y, &linear_grid(0.0, 2.5, 21)).unwrap();
        for w in table.rows.windows(2) {
            let (a, b) = (&w[0].report, &w[1].report);
            assert!(b.recall <= a.recall);
            assert!(b.counts.tp + b.counts.fp <= a.counts.tp + a.counts.fp);
        }
        let best = table.best_row().report.f1;
        assert!(table.rows.iter().all(|r| r.report.f1 <= best));
    }

    #[test]
    fn grid_endpoints() {
        let g = linear_grid(0.0, 2.5, 21);
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[20], 2.5);
        assert!((g[1] - 0.125).abs() < 1e-15);
    }
}
