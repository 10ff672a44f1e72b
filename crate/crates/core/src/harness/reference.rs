//! Published per-class results, kept as fixtures that desk runs can be diffed
//! against. Column keys are `<method>.<metric>` with metric one of `test`,
//! `forget`, `delta` and `ad` (activation distance); `gold` is a method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SOURCES: &[(&str, &str)] = &[
    ("cifar10-resnet18-n100", include_str!("../../references/cifar10-resnet18-n100.toml")),
    ("cifar100-resnet18-n100", include_str!("../../references/cifar100-resnet18-n100.toml")),
    ("cifar10-resnet18-activation", include_str!("../../references/cifar10-resnet18-activation.toml")),
    ("cifar10-resnet18-ablation", include_str!("../../references/cifar10-resnet18-ablation.toml")),
    ("cifar10-resnet18-n500", include_str!("../../references/cifar10-resnet18-n500.toml")),
    ("cifar10-allcnn-n100", include_str!("../../references/cifar10-allcnn-n100.toml")),
    ("cifar10-vit-n100", include_str!("../../references/cifar10-vit-n100.toml")),
    ("cifar100-vit-n100", include_str!("../../references/cifar100-vit-n100.toml")),
    ("fisher-n100", include_str!("../../references/fisher-n100.toml")),
];

/// Largest gap between a printed average and the recomputed mean that is
/// still explained by two-decimal rounding.
pub const AVG_TOLERANCE: f64 = 0.051;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub label: String,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub arch: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    #[serde(default)]
    pub name: String,
    pub description: String,
    pub dataset: String,
    #[serde(default)]
    pub arch: Option<String>,
    pub n_forget: usize,
    #[serde(default)]
    pub original_test_avg: Option<f64>,
    pub columns: Vec<String>,
    /// Columns whose printed average disagrees with the per-class mean.
    #[serde(default)]
    pub avg_mismatch: Vec<String>,
    pub rows: Vec<ReferenceRow>,
    #[serde(default)]
    pub avg: Option<ReferenceRow>,
}

/// One column whose printed average was checked against its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgCheck {
    pub column: String,
    pub printed: f64,
    pub mean: f64,
    pub listed_as_mismatch: bool,
}

impl AvgCheck {
    pub fn consistent(&self) -> bool {
        let agrees = (self.printed - self.mean).abs() <= AVG_TOLERANCE;
        agrees != self.listed_as_mismatch
    }
}

pub fn reference_names() -> Vec<&'static str> {
    SOURCES.iter().map(|(n, _)| *n).collect()
}

pub fn reference(name: &str) -> Result<ReferenceTable> {
    let (_, text) = SOURCES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown reference `{name}`; known: {}", reference_names().join(", ")))
    })?;
    let mut t: ReferenceTable = toml::from_str(text)?;
    t.name = name.to_string();
    t.check_shape()?;
    Ok(t)
}

pub fn references() -> Result<Vec<ReferenceTable>> {
    reference_names().into_iter().map(reference).collect()
}

impl ReferenceTable {
    fn check_shape(&self) -> Result<()> {
        let w = self.columns.len();
        for row in self.rows.iter().chain(&self.avg) {
            if row.values.len() != w {
                return Err(Error::Format(format!(
                    "reference {} row `{}` has {} values for {w} columns",
                    self.name,
                    row.label,
                    row.values.len()
                )));
            }
        }
        if let Some(c) = self.avg_mismatch.iter().find(|c| !self.columns.contains(c)) {
            return Err(Error::Format(format!("reference {}: avg_mismatch names unknown column {c}", self.name)));
        }
        Ok(())
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn value(&self, row: &ReferenceRow, column: &str) -> Option<f64> {
        self.column_index(column).map(|i| row.values[i])
    }

    pub fn row_for_class(&self, class: usize) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.class == Some(class))
    }

    pub fn column_mean(&self, column: &str) -> Option<f64> {
        let i = self.column_index(column)?;
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.values[i]).sum::<f64>() / self.rows.len() as f64)
    }

    /// Printed averages against recomputed means, one entry per column.
    pub fn check_avg(&self) -> Vec<AvgCheck> {
        let Some(avg) = &self.avg else { return Vec::new() };
        self.columns
            .iter()
            .zip(&avg.values)
            .map(|(c, &printed)| AvgCheck {
                column: c.clone(),
                printed,
                mean: self.column_mean(c).expect("column exists"),
                listed_as_mismatch: self.avg_mismatch.contains(c),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_parses() {
        let all = references().unwrap();
        assert_eq!(all.len(), SOURCES.len());
        let main = reference("cifar10-resnet18-n100").unwrap();
        assert_eq!(main.rows.len(), 10);
        let c0 = main.row_for_class(0).unwrap();
        assert_eq!(main.value(c0, "tmu.delta"), Some(4.0));
        assert_eq!(main.value(c0, "gold.test"), Some(85.61));
        assert_eq!(main.value(main.avg.as_ref().unwrap(), "badteacher.delta"), Some(8.0));
    }

    #[test]
    fn unknown_reference_rejected() {
        assert!(reference("imagenet").is_err());
    }
}
