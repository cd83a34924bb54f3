use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

use super::image::load_label;
use super::manifest::{Manifest, Split};

/// Changed / unchanged pixel counts for one labelled image (or a pre-counted
/// group of images).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountRecord {
    pub split: Split,
    pub changed: u64,
    pub unchanged: u64,
}

impl CountRecord {
    /// Parses `split<TAB>changed<TAB>unchanged` lines; `#` starts a comment
    /// and `,`/`_` digit separators are accepted.
    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        let num = |s: &str, line: usize| -> Result<u64> {
            s.trim()
                .replace([',', '_'], "")
                .parse()
                .map_err(|_| Error::Config(format!("count line {line}: bad number {s:?}")))
        };
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [split, changed, unchanged] = f[..] else {
                return Err(Error::Config(format!(
                    "count line {}: expected split, changed, unchanged",
                    i + 1
                )));
            };
            out.push(CountRecord {
                split: split.trim().parse()?,
                changed: num(changed, i + 1)?,
                unchanged: num(unchanged, i + 1)?,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub changed: u64,
    pub unchanged: u64,
}

impl SplitStats {
    /// Changed / unchanged, or `None` when no pixel is unchanged.
    pub fn ratio(&self) -> Option<f64> {
        (self.unchanged > 0).then(|| self.changed as f64 / self.unchanged as f64)
    }
}

/// Per-split and total pixel statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatsTable {
    pub splits: Vec<(Split, SplitStats)>,
    pub total: SplitStats,
}

impl StatsTable {
    pub fn get(&self, split: Split) -> Option<SplitStats> {
        self.splits
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, v)| *v)
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(
        || "inf (no unchanged pixels)".to_string(),
        |v| format!("{v:.3}"),
    )
}

impl fmt::Display for StatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>16} {:>18} {:>8}",
            "split", "changed pixels", "unchanged pixels", "c/uc"
        )?;
        let rows = self
            .splits
            .iter()
            .map(|(s, v)| (s.as_str(), v))
            .chain([("total", &self.total)]);
        for (name, v) in rows {
            writeln!(
                f,
                "{:<8} {:>16} {:>18} {:>8}",
                name,
                v.changed,
                v.unchanged,
                fmt_ratio(v.ratio())
            )?;
        }
        Ok(())
    }
}

pub fn stats_from_counts(records: &[CountRecord]) -> StatsTable {
    let mut splits = Vec::new();
    let mut total = SplitStats::default();
    for split in Split::ALL {
        let mut s = SplitStats::default();
        let mut any = false;
        for r in records.iter().filter(|r| r.split == split) {
            s.changed += r.changed;
            s.unchanged += r.unchanged;
            any = true;
        }
        if any {
            total.changed += s.changed;
            total.unchanged += s.unchanged;
            splits.push((split, s));
        }
    }
    StatsTable { splits, total }
}

/// Reads every label in the manifest and tallies pixels per split.
pub fn dataset_stats(manifest: &Manifest) -> Result<StatsTable> {
    let records = manifest
        .entries
        .iter()
        .map(|e| {
            let y = load_label(&e.label)?;
            Ok(CountRecord {
                split: e.split,
                changed: y.changed(),
                unchanged: y.unchanged(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_from_counts(&records))
}

pub fn load_counts(path: &Path) -> Result<Vec<CountRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    CountRecord::parse_all(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_label, ManifestEntry};
    use crate::losses::LabelMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_changed_label_has_flagged_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.png");
        save_label(&p, &LabelMap::new(10, 10, vec![1; 100]).unwrap()).unwrap();
        let m = Manifest {
            entries: vec![ManifestEntry {
                t0: p.clone(),
                t1: p.clone(),
                label: p,
                split: Split::Test,
            }],
        };
        let s = dataset_stats(&m).unwrap();
        assert_eq!(
            s.total,
            SplitStats {
                changed: 100,
                unchanged: 0
            }
        );
        assert_eq!(s.total.ratio(), None);
        assert!(s.to_string().contains("inf"));
    }

    #[test]
    fn random_labels_match_naive_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut entries = Vec::new();
        let mut naive = [(0u64, 0u64); 3];
        for i in 0..9 {
            let split = Split::ALL[i % 3];
            let (h, w) = (rng.random_range(4..20), rng.random_range(4..20));
            let data: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.2) as u8).collect();
            for &v in &data {
                if v == 1 {
                    naive[i % 3].0 += 1;
                } else {
                    naive[i % 3].1 += 1;
                }
            }
            let p = dir.path().join(format!("y{i}.png"));
            save_label(&p, &LabelMap::new(h, w, data).unwrap()).unwrap();
            entries.push(ManifestEntry {
                t0: p.clone(),
                t1: p.clone(),
                label: p,
                split,
            });
        }
        let s = dataset_stats(&Manifest { entries }).unwrap();
        for (k, split) in Split::ALL.iter().enumerate() {
            let got = s.get(*split).unwrap();
            assert_eq!((got.changed, got.unchanged), naive[k]);
        }
        assert_eq!(s.total.changed, naive.iter().map(|n| n.0).sum::<u64>());
    }

    #[test]
    fn count_lines_accept_separators() {
        let r = CountRecord::parse_all("# CDD\ntrain\t83,981,014\t571_378_986\n").unwrap();
        assert_eq!(r[0].changed, 83_981_014);
        assert_eq!(r[0].unchanged, 571_378_986);
        assert!(CountRecord::parse_all("train\t1\n").is_err());
    }
}
