use serde::{Deserialize, Serialize};

/// Per-feature standardization fitted on training data, followed by a
/// `1/√n` factor so the summed input to each hidden unit stays O(1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let n = rows.first().map_or(0, |r| r.len());
        let count = rows.len().max(1) as f64;
        let mut mean = vec![0.0; n];
        for r in &rows {
            mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in &rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let root_n = (n.max(1) as f64).sqrt();
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                let sd = if sd > 1e-12 { sd } else { 1.0 };
                1.0 / (sd * root_n)
            })
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_and_scales() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = FeatureScaler::fit(rows.iter().map(|r| r.as_slice()));
        let t = s.transform(&[3.0, 5.0]);
        assert!((t[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(t[1], 0.0);
    }
}
