//! Attack rates, dataset filtering, Jensen–Shannon diversity and reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::Dataset;
use crate::erosion::Calibration;
use crate::network::{Classifier, NetworkError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no sample is classified correctly by all {models} filter models; use fewer or stronger models")]
    EmptyFilter { models: usize },
    #[error("{which} is not a distribution: {reason}")]
    NotDistribution { which: &'static str, reason: String },
    #[error("distributions have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("diversity needs at least two models, got {0}")]
    TooFewModels(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug)]
pub struct Filtered {
    pub dataset: Dataset,
    pub kept: usize,
    pub total: usize,
}

/// Keeps the samples every model classifies correctly.
pub fn filter_dataset(data: &Dataset, models: &[&dyn Classifier]) -> Result<Filtered> {
    let total = data.len();
    let mut keep = vec![true; total];
    if !models.is_empty() {
        let batch = data.all();
        for m in models {
            for ((k, p), l) in keep.iter_mut().zip(m.predict(&batch)?).zip(data.labels()) {
                *k &= p == *l;
            }
        }
    }
    let indices: Vec<usize> = (0..total).filter(|&i| keep[i]).collect();
    if indices.is_empty() {
        return Err(EvalError::EmptyFilter {
            models: models.len(),
        });
    }
    Ok(Filtered {
        kept: indices.len(),
        dataset: data.select(&indices),
        total,
    })
}

/// Fraction of `adversarial` rows `target` does not label as `labels`.
pub fn attack_rate(adversarial: &Tensor, labels: &[usize], target: &dyn Classifier) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = target.predict(adversarial)?;
    let fooled = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(fooled as f64 / labels.len() as f64)
}

fn check_distribution(which: &'static str, p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(EvalError::NotDistribution {
            which,
            reason: format!("entry {v} is negative or not finite"),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EvalError::NotDistribution {
            which,
            reason: format!("sums to {sum}"),
        });
    }
    Ok(())
}

fn kl_to_mid(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            d += a * (a / (0.5 * (a + b))).ln();
        }
    }
    d
}

fn jsd_unchecked(p: &[f64], q: &[f64]) -> f64 {
    (0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).max(0.0)
}

/// Jensen–Shannon divergence in nats, with `0 ln 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(EvalError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(jsd_unchecked(p, q))
}

/// Labeled square or rectangular matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    /// Mean of the off-diagonal entries of a square matrix.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.values.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values[i][j];
                }
            }
        }
        sum / (n * n.saturating_sub(1)).max(1) as f64
    }

    /// CSV with a header row `corner,<col ids>` and one row per row id.
    pub fn to_csv(&self, corner: &str) -> String {
        let mut out = String::from(corner);
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            out.push_str(r);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Dataset-averaged pairwise JSD between the models' softmax outputs.
pub fn diversity_matrix(models: &[&dyn Classifier], data: &Dataset) -> Result<Matrix> {
    if models.len() < 2 {
        return Err(EvalError::TooFewModels(models.len()));
    }
    let batch = data.all();
    let probs = models
        .par_iter()
        .map(|m| m.probabilities(&batch))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n = models.len();
    let classes = probs[0].sample_len();
    let count = batch.batch_size() as f64;
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let total: f64 = probs[i]
                .data()
                .chunks(classes)
                .zip(probs[j].data().chunks(classes))
                .map(|(p, q)| jsd_unchecked(p, q))
                .sum();
            values[i][j] = total / count;
            values[j][i] = total / count;
        }
    }
    let ids: Vec<String> = models.iter().map(|m| m.model_id()).collect();
    Ok(Matrix {
        rows: ids.clone(),
        cols: ids,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub model: String,
    pub calibration: Calibration,
}

/// Everything an experiment measured.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    /// Rows: attack sources (plan labels); columns: target model ids.
    pub attack_rates: Option<Matrix>,
    /// Images attacked per row.
    pub sample_counts: Vec<usize>,
    /// Mean black-box rate per row (targets other than the row's sources).
    pub black_box_means: Vec<f64>,
    pub accuracy_curves: Vec<NamedCurve>,
    /// JSD in nats.
    pub diversity: Option<Matrix>,
    pub timing: Vec<Timing>,
    #[serde(default)]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    /// Writes `<stem>.json` plus one CSV per matrix; returns written paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| EvalError::Io {
                path: path.clone(),
                source,
            })?;
            written.push(path);
            Ok(())
        };
        put(
            format!("{stem}.json"),
            serde_json::to_string_pretty(self).expect("report serializes") + "\n",
        )?;
        if let Some(m) = &self.attack_rates {
            put(format!("{stem}.attack_rates.csv"), m.to_csv("source"))?;
        }
        if let Some(m) = &self.diversity {
            put(format!("{stem}.jsd.csv"), m.to_csv("model"))?;
        }
        for c in &self.accuracy_curves {
            let mut csv = String::from("magnitude,accuracy\n");
            for p in &c.calibration.curve {
                csv.push_str(&format!("{},{}\n", p.magnitude, p.accuracy));
            }
            let safe: String = c
                .model
                .chars()
                .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' { ch } else { '_' })
                .collect();
            put(format!("{stem}.curve.{safe}.csv"), csv)?;
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, Task};
    use crate::network::{build, Preset};

    #[test]
    fn jsd_reference_values() {
        // ½ ln(4/3) + ½ (½ ln(2/3) + ½ ln 2), computed term by term.
        let oracle = 0.5 * (4.0f64 / 3.0).ln() + 0.5 * (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln());
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.215761).abs() < 1e-6);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn jsd_rejects_non_distributions() {
        assert!(matches!(jsd(&[0.5, 0.6], &[0.5, 0.5]), Err(EvalError::NotDistribution { which: "p", .. })));
        assert!(matches!(jsd(&[0.5, 0.5], &[1.5, -0.5]), Err(EvalError::NotDistribution { which: "q", .. })));
        assert!(matches!(jsd(&[1.0], &[0.5, 0.5]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn filtering() {
        let data = gen_synthetic(Task::BlobsKd, 200, 0.05, 3).unwrap();
        let none = filter_dataset(&data, &[]).unwrap();
        assert_eq!(none.kept, data.len());
        let net = build(Preset::PlainMlp.spec("p", &data.sample_shape, data.classes), 1).unwrap();
        let f = filter_dataset(&data, &[&net]).unwrap();
        assert_eq!(f.total, 200);
        let batch = f.dataset.all();
        assert_eq!(attack_rate(&batch, f.dataset.labels(), &net).unwrap(), 0.0);
        assert_eq!(net.accuracy_with(&batch, f.dataset.labels(), &crate::network::NoErosion).unwrap(), 1.0);
    }

    #[test]
    fn empty_filter_is_an_error() {
        let data = gen_synthetic(Task::BlobsKd, 200, 0.05, 3).unwrap();
        let net = build(Preset::PlainMlp.spec("p", &data.sample_shape, data.classes), 1)
            .unwrap()
            .map_params(|_, t| t.data_mut().fill(0.0))
            .unwrap();
        // All-zero weights predict class 0 everywhere; dropping class-0
        // samples leaves nothing it gets right.
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] != 0).collect();
        let err = filter_dataset(&data.select(&idx), &[&net]).unwrap_err();
        assert!(matches!(err, EvalError::EmptyFilter { models: 1 }));
    }

    #[test]
    fn identical_models_have_zero_diversity() {
        let data = gen_synthetic(Task::BlobsKd, 100, 0.05, 3).unwrap();
        let a = build(Preset::PlainMlp.spec("p", &data.sample_shape, data.classes), 1).unwrap();
        let b = a.clone();
        let c = build(Preset::PlainMlp.spec("p", &data.sample_shape, data.classes), 2).unwrap();
        let m = diversity_matrix(&[&a, &b, &c], &data).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert!(m.get(0, 2) > 0.0);
        assert_eq!(m.get(0, 2), m.get(2, 0));
        assert!(matches!(diversity_matrix(&[&a], &data), Err(EvalError::TooFewModels(1))));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix {
            rows: vec!["s1".into()],
            cols: vec!["a#1".into(), "b#2".into()],
            values: vec![vec![1.0, 0.25]],
        };
        let report = EvalReport {
            attack_rates: Some(m),
            ..Default::default()
        };
        let files = report.write(dir.path(), "r").unwrap();
        assert_eq!(files.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("r.attack_rates.csv")).unwrap();
        assert_eq!(csv, "source,a#1,b#2\ns1,1,0.25\n");
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
