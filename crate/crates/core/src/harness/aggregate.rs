use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::AttackKind;

/// Mean, sample standard deviation (`n - 1` divisor) and standard error
/// `std / √n` of replicate values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptyAggregate);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Aggregate {
        mean,
        std,
        stderr: std / n.sqrt(),
        count: values.len(),
    })
}

/// Which input the row describes: clean test images or an attack family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Attack(AttackKind),
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Attack(k) => k.as_str(),
        }
    }
}

/// Metrics of one (replicate, layer, condition, ε) cell. Spectral fields are
/// `None` when the activation spectrum was degenerate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub replicate: usize,
    pub layer: usize,
    pub condition: Condition,
    pub epsilon: f64,
    pub accuracy: f64,
    pub spectrum: Option<SpectrumStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub alpha: f64,
    pub r_squared: f64,
    pub dimensionality: f64,
    pub top10_fraction: f64,
}

/// Replicate aggregate of one (layer, condition, ε) cell. Layers are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub condition: Condition,
    pub layer: usize,
    pub epsilon: f64,
    pub accuracy: Aggregate,
    /// Spectral aggregates cover only replicates with a usable spectrum.
    pub alpha: Option<Aggregate>,
    pub dimensionality: Option<Aggregate>,
    pub top10_fraction: Option<Aggregate>,
    pub replicates: usize,
}

/// Groups cells by (condition, layer, ε) and aggregates each group. Output is
/// sorted by condition, layer, then ε, whatever the input order.
pub fn aggregate_cells(cells: &[CellResult]) -> Result<Vec<AggregateRow>, HarnessError> {
    let mut keys: Vec<(Condition, usize, f64)> = cells.iter().map(|c| (c.condition, c.layer, c.epsilon)).collect();
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    keys.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2.to_bits() == b.2.to_bits());
    keys.into_iter()
        .map(|(condition, layer, epsilon)| {
            let mut group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.condition == condition && c.layer == layer && c.epsilon.to_bits() == epsilon.to_bits())
                .collect();
            // Replicate order fixes the summation order.
            group.sort_by_key(|c| c.replicate);
            let acc: Vec<f64> = group.iter().map(|c| c.accuracy).collect();
            let spectra: Vec<SpectrumStats> = group.iter().filter_map(|c| c.spectrum).collect();
            let over = |f: fn(&SpectrumStats) -> f64| -> Option<Aggregate> {
                let v: Vec<f64> = spectra.iter().map(f).collect();
                aggregate(&v).ok()
            };
            Ok(AggregateRow {
                condition,
                layer,
                epsilon,
                accuracy: aggregate(&acc)?,
                alpha: over(|s| s.alpha),
                dimensionality: over(|s| s.dimensionality),
                top10_fraction: over(|s| s.top10_fraction),
                replicates: group.len(),
            })
        })
        .collect()
}
