use serde::{Deserialize, Serialize};

use crate::datagen::{EventClass, CLASS_COUNT};

/// 13 × 13 counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: vec![vec![0; CLASS_COUNT]; CLASS_COUNT],
        }
    }
}

/// Percentage with at most two decimals and no trailing zeros, e.g. `88%`,
/// `12.5%`.
pub fn format_percent(p: f64) -> String {
    let s = format!("{:.2}", p);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (EventClass, EventClass)>) -> Self {
        let mut m = Self::default();
        for (t, p) in pairs {
            m.record(t, p);
        }
        m
    }

    pub fn record(&mut self, truth: EventClass, predicted: EventClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASS_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, class: EventClass) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    /// Correct predictions over all predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    /// Row-normalized percentages; empty rows are all zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter()
                    .map(|c| {
                        if t == 0 {
                            0.0
                        } else {
                            100.0 * *c as f64 / t as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Off-diagonal count inside the block of the given classes.
    pub fn off_diagonal_within(&self, classes: &[u8]) -> u64 {
        let mut s = 0;
        for &t in classes {
            for &p in classes {
                if t != p {
                    s += self.counts[t as usize - 1][p as usize - 1];
                }
            }
        }
        s
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - self.trace()
    }

    /// CSV with a header `true_class,predicted_class,count,row_percent`
    /// and one line per cell.
    pub fn to_csv(&self) -> String {
        let pct = self.row_percentages();
        let mut out = String::from("true_class,predicted_class,count,row_percent\n");
        for t in 0..CLASS_COUNT {
            for p in 0..CLASS_COUNT {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    t + 1,
                    p + 1,
                    self.counts[t][p],
                    format_percent(pct[t][p])
                ));
            }
        }
        out
    }

    /// Row-normalized table with blank cells for zero entries.
    pub fn percentage_table(&self) -> String {
        let pct = self.row_percentages();
        let mut out = String::from("target\\output");
        for p in 1..=CLASS_COUNT {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
        for (t, row) in pct.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for (p, v) in row.iter().enumerate() {
                out.push(',');
                if self.counts[t][p] > 0 {
                    out.push_str(&format_percent(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(id: u8) -> EventClass {
        EventClass::new(id).unwrap()
    }

    #[test]
    fn percent_format() {
        assert_eq!(format_percent(88.0), "88%");
        assert_eq!(format_percent(12.5), "12.5%");
        assert_eq!(format_percent(100.0 / 3.0), "33.33%");
        assert_eq!(format_percent(0.0), "0%");
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let perfect = ConfusionMatrix::from_pairs(EventClass::all().map(|k| (k, k)));
        assert_eq!(perfect.accuracy(), 1.0);
        assert_eq!(perfect.off_diagonal(), 0);
        let constant = ConfusionMatrix::from_pairs(EventClass::all().map(|k| (k, c(1))));
        assert_eq!(constant.accuracy(), 1.0 / 13.0);
    }

    #[test]
    fn class_six_row() {
        let mut pairs = vec![(c(6), c(6)); 88];
        pairs.extend(vec![(c(6), c(7)); 10]);
        pairs.extend(vec![(c(6), c(5)); 2]);
        let m = ConfusionMatrix::from_pairs(pairs);
        let row = &m.row_percentages()[5];
        assert_eq!((row[4], row[5], row[6]), (2.0, 88.0, 10.0));
        assert_eq!(m.row_total(c(6)), 100);
        assert_eq!(m.accuracy(), 0.88);
        let table = m.percentage_table();
        assert_eq!(table.lines().nth(6).unwrap(), "6,,,,,2%,88%,10%,,,,,,");
        assert_eq!(m.off_diagonal_within(&[5, 6, 7, 8, 9]), 12);
    }
}
