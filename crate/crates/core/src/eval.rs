//! Alignment metrics and per-run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::modeling::{accuracy, TrainedModel};

/// `|acc_forget - gold_acc_forget|` in percentage points.
pub fn alignment_delta(acc_forget: f64, gold_acc_forget: f64) -> f64 {
    (acc_forget - gold_acc_forget).abs()
}

/// Mean L2 distance between the two models' penultimate embeddings.
pub fn activation_distance(a: &TrainedModel, b: &TrainedModel, samples: &LabeledDataset) -> Result<f64> {
    if a.network.embedding_dim() != b.network.embedding_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dim {}", a.network.embedding_dim()),
            actual: b.network.embedding_dim().to_string(),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("activation distance".into()));
    }
    let ea = a.network.embed(samples.images().view())?;
    let eb = b.network.embed(samples.images().view())?;
    let total: f64 = ea
        .rows()
        .into_iter()
        .zip(eb.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub easy: usize,
    pub hard: usize,
}

/// Metrics of one unlearning run. Gold-dependent fields are `null` when no
/// gold model was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: String,
    pub forget_class: usize,
    pub n_forget: usize,
    pub seed: u64,
    pub acc_test: f64,
    pub acc_forget: f64,
    pub acc_remain: f64,
    pub gold_acc_test: Option<f64>,
    pub gold_acc_forget: Option<f64>,
    pub delta: Option<f64>,
    pub activation_distance: Option<f64>,
    pub partition: Option<PartitionSizes>,
    pub wall_clock: f64,
    pub config_fingerprint: String,
}

/// Extra run information not derivable from the models.
#[derive(Debug, Clone, Default)]
pub struct RunExtras {
    pub method: String,
    pub seed: u64,
    pub partition: Option<PartitionSizes>,
    pub wall_clock: f64,
    pub config_fingerprint: String,
}

pub fn evaluate_run(
    unlearned: &TrainedModel,
    gold: Option<&TrainedModel>,
    split: &DataSplit,
    extras: RunExtras,
) -> Result<UnlearnReport> {
    let acc_forget = accuracy(unlearned, &split.forget)?;
    let (gold_acc_test, gold_acc_forget, delta, activation) = match gold {
        Some(g) => {
            let gf = accuracy(g, &split.forget)?;
            (
                Some(accuracy(g, &split.test)?),
                Some(gf),
                Some(alignment_delta(acc_forget, gf)),
                Some(activation_distance(unlearned, g, &split.forget)?),
            )
        }
        None => (None, None, None, None),
    };
    Ok(UnlearnReport {
        method: extras.method,
        forget_class: split.forget_class,
        n_forget: split.forget.len(),
        seed: extras.seed,
        acc_test: accuracy(unlearned, &split.test)?,
        acc_forget,
        acc_remain: accuracy(unlearned, &split.remain)?,
        gold_acc_test,
        gold_acc_forget,
        delta,
        activation_distance: activation,
        partition: extras.partition,
        wall_clock: extras.wall_clock,
        config_fingerprint: extras.config_fingerprint,
    })
}

impl UnlearnReport {
    pub const CSV_HEADER: [&'static str; 15] = [
        "method",
        "forget_class",
        "n_forget",
        "seed",
        "acc_test",
        "acc_forget",
        "acc_remain",
        "gold_acc_test",
        "gold_acc_forget",
        "delta",
        "activation_distance",
        "n_easy",
        "n_hard",
        "wall_clock",
        "config_fingerprint",
    ];

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One CSV row in [`Self::CSV_HEADER`] order; absent values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let part =
            |f: fn(&PartitionSizes) -> usize| self.partition.as_ref().map(|p| f(p).to_string()).unwrap_or_default();
        vec![
            self.method.clone(),
            self.forget_class.to_string(),
            self.n_forget.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.acc_test),
            format!("{:?}", self.acc_forget),
            format!("{:?}", self.acc_remain),
            opt(self.gold_acc_test),
            opt(self.gold_acc_forget),
            opt(self.delta),
            opt(self.activation_distance),
            part(|p| p.easy),
            part(|p| p.hard),
            format!("{:?}", self.wall_clock),
            self.config_fingerprint.clone(),
        ]
    }

    /// Inverse of [`Self::csv_row`].
    pub fn from_csv_row(row: &[String]) -> Result<Self> {
        if row.len() != Self::CSV_HEADER.len() {
            return Err(Error::CountMismatch { expected: Self::CSV_HEADER.len(), actual: row.len() });
        }
        let bad = |c: &str, e: String| Error::Format(format!("column {c}: {e}"));
        let f = |i: usize| row[i].parse::<f64>().map_err(|e| bad(Self::CSV_HEADER[i], e.to_string()));
        let u = |i: usize| row[i].parse::<usize>().map_err(|e| bad(Self::CSV_HEADER[i], e.to_string()));
        let opt = |i: usize| if row[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        let partition = if row[11].is_empty() { None } else { Some(PartitionSizes { easy: u(11)?, hard: u(12)? }) };
        Ok(Self {
            method: row[0].clone(),
            forget_class: u(1)?,
            n_forget: u(2)?,
            seed: row[3].parse().map_err(|e: std::num::ParseIntError| bad("seed", e.to_string()))?,
            acc_test: f(4)?,
            acc_forget: f(5)?,
            acc_remain: f(6)?,
            gold_acc_test: opt(7)?,
            gold_acc_forget: opt(8)?,
            delta: opt(9)?,
            activation_distance: opt(10)?,
            partition,
            wall_clock: f(13)?,
            config_fingerprint: row[14].clone(),
        })
    }
}

pub fn write_reports_csv(reports: &[UnlearnReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(UnlearnReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<UnlearnReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            UnlearnReport::from_csv_row(&rec.iter().map(str::to_string).collect::<Vec<_>>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::class_mixture;
    use crate::data::{make_removal_split, MixtureConfig};
    use crate::modeling::{build_model, Arch};

    #[test]
    fn delta_examples() {
        assert_eq!(alignment_delta(96.0, 92.0), 4.0);
        assert_eq!(alignment_delta(37.5, 37.5), 0.0);
        assert_eq!(alignment_delta(0.0, 100.0), 100.0);
    }

    fn fixture() -> (DataSplit, TrainedModel, TrainedModel) {
        let tt = class_mixture(&MixtureConfig { train_per_class: 20, test_per_class: 5, ..Default::default() });
        let split = make_removal_split(&tt.train, &tt.test, 1, 5, 0).unwrap();
        let arch = Arch::Mlp { hidden: vec![8] };
        let a = build_model(&arch, tt.train.shape(), 10, 0).unwrap();
        let b = build_model(&arch, tt.train.shape(), 10, 1).unwrap();
        (split, a, b)
    }

    #[test]
    fn report_without_gold_has_nulls() {
        let (split, a, _) = fixture();
        let r = evaluate_run(&a, None, &split, RunExtras::default()).unwrap();
        assert!(r.delta.is_none() && r.activation_distance.is_none() && r.gold_acc_forget.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"delta\":null"));
    }

    #[test]
    fn report_round_trips() {
        let (split, a, b) = fixture();
        let extras = RunExtras {
            method: "tmu".into(),
            seed: 3,
            partition: Some(PartitionSizes { easy: 4, hard: 1 }),
            wall_clock: 0.125,
            config_fingerprint: "abc".into(),
        };
        let r = evaluate_run(&a, Some(&b), &split, extras).unwrap();
        assert!(r.delta.unwrap() >= 0.0 && r.activation_distance.unwrap() > 0.0);
        let dir = tempfile::tempdir().unwrap();
        r.save(&dir.path().join("r.json")).unwrap();
        assert_eq!(UnlearnReport::load(&dir.path().join("r.json")).unwrap(), r);
        let csv = dir.path().join("r.csv");
        let gold_less = evaluate_run(&b, None, &split, RunExtras::default()).unwrap();
        write_reports_csv(&[r.clone(), gold_less.clone()], &csv).unwrap();
        assert_eq!(read_reports_csv(&csv).unwrap(), vec![r, gold_less]);
    }

    #[test]
    fn self_distance_is_zero() {
        let (split, a, _) = fixture();
        assert_eq!(activation_distance(&a, &a, &split.forget).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_embeddings_rejected() {
        let (split, a, _) = fixture();
        let c = build_model(&Arch::Mlp { hidden: vec![9] }, split.forget.shape(), 10, 0).unwrap();
        assert!(matches!(activation_distance(&a, &c, &split.forget), Err(Error::ShapeMismatch { .. })));
    }
}
