//! CSV tables and the run manifest. Floats are written in Rust's shortest
//! round-trip form, so identical results give byte-identical files; missing
//! values are empty fields.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::aggregate::{Aggregate, AggregateRow, CellResult};
use super::analysis::{EffectiveNFit, LayerSpectrum, TheoryRow};
use super::training::CurveRow;
use super::{ExperimentConfig, HarnessError, ReplicateSeeds};

/// Column order of the ε-sweep summary table.
pub const SWEEP_COLUMNS: [&str; 7] = ["kind", "layer", "epsilon", "acc_mean", "acc_se", "alpha_mean", "alpha_se"];

const FULL_COLUMNS: [&str; 13] = [
    "kind",
    "layer",
    "epsilon",
    "replicates",
    "acc_mean",
    "acc_se",
    "alpha_mean",
    "alpha_se",
    "dim_mean",
    "dim_se",
    "top10_mean",
    "top10_se",
    "spectral_replicates",
];

/// Writes a CSV table, creating parent directories.
pub struct Table {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, HarnessError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(header)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), HarnessError> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, HarnessError> {
        self.writer.flush().map_err(|source| HarnessError::Io {
            path: self.path.display().to_string(),
            source,
        })?;
        Ok(self.path)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn mean(a: Option<Aggregate>) -> String {
    opt(a.map(|a| a.mean))
}

fn se(a: Option<Aggregate>) -> String {
    opt(a.map(|a| a.stderr))
}

/// `kind,layer,epsilon,acc_mean,acc_se,alpha_mean,alpha_se`.
pub fn write_sweep(path: &Path, rows: &[AggregateRow]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &SWEEP_COLUMNS)?;
    for r in rows {
        t.row(&[
            r.condition.as_str().to_string(),
            r.layer.to_string(),
            num(r.epsilon),
            num(r.accuracy.mean),
            num(r.accuracy.stderr),
            mean(r.alpha),
            se(r.alpha),
        ])?;
    }
    t.finish()
}

/// Every aggregate, including dimensionality and top-10 fraction.
pub fn write_aggregates(path: &Path, rows: &[AggregateRow]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &FULL_COLUMNS)?;
    for r in rows {
        t.row(&aggregate_fields(r))?;
    }
    t.finish()
}

fn aggregate_fields(r: &AggregateRow) -> Vec<String> {
    vec![
        r.condition.as_str().to_string(),
        r.layer.to_string(),
        num(r.epsilon),
        r.replicates.to_string(),
        num(r.accuracy.mean),
        num(r.accuracy.stderr),
        mean(r.alpha),
        se(r.alpha),
        mean(r.dimensionality),
        se(r.dimensionality),
        mean(r.top10_fraction),
        se(r.top10_fraction),
        r.alpha.map(|a| a.count).unwrap_or(0).to_string(),
    ]
}

/// Aggregates of several widths, with a leading `width` column.
pub fn write_width_aggregates(path: &Path, rows: &[(usize, AggregateRow)]) -> Result<PathBuf, HarnessError> {
    let mut header = vec!["width"];
    header.extend(FULL_COLUMNS);
    let mut t = Table::create(path, &header)?;
    for (w, r) in rows {
        let mut fields = vec![w.to_string()];
        fields.extend(aggregate_fields(r));
        t.row(&fields)?;
    }
    t.finish()
}

/// Per-replicate cells, sorted by kind, layer, ε, replicate.
pub fn write_cells(path: &Path, cells: &[CellResult]) -> Result<PathBuf, HarnessError> {
    let mut sorted: Vec<&CellResult> = cells.iter().collect();
    sorted.sort_by(|a, b| {
        a.condition
            .cmp(&b.condition)
            .then(a.layer.cmp(&b.layer))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.replicate.cmp(&b.replicate))
    });
    let mut t = Table::create(
        path,
        &["kind", "layer", "epsilon", "replicate", "accuracy", "alpha", "r_squared", "dimensionality", "top10_fraction"],
    )?;
    for c in sorted {
        let s = c.spectrum;
        t.row(&[
            c.condition.as_str().to_string(),
            c.layer.to_string(),
            num(c.epsilon),
            c.replicate.to_string(),
            num(c.accuracy),
            opt(s.map(|s| s.alpha)),
            opt(s.map(|s| s.r_squared)),
            opt(s.map(|s| s.dimensionality)),
            opt(s.map(|s| s.top10_fraction)),
        ])?;
    }
    t.finish()
}

pub fn write_curves(path: &Path, curves: &[CurveRow]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["replicate", "epoch", "layer", "learning_rate", "train_error", "test_error"])?;
    for c in curves {
        t.row(&[
            c.replicate.to_string(),
            c.epoch.to_string(),
            c.layer.to_string(),
            num(c.learning_rate),
            num(c.train_error),
            num(c.test_error),
        ])?;
    }
    t.finish()
}

/// Final and best-epoch test accuracy per replicate and layer.
pub fn write_training_summary(path: &Path, curves: &[CurveRow]) -> Result<PathBuf, HarnessError> {
    let mut keys: Vec<(usize, usize)> = curves.iter().map(|c| (c.replicate, c.layer)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut t = Table::create(path, &["replicate", "layer", "final_epoch", "final_accuracy", "best_epoch", "best_accuracy"])?;
    for (rep, layer) in keys {
        let rows: Vec<&CurveRow> = curves.iter().filter(|c| c.replicate == rep && c.layer == layer).collect();
        let last = rows.iter().max_by_key(|c| c.epoch).expect("group is non-empty");
        // Earliest epoch wins ties.
        let best = rows
            .iter()
            .min_by(|a, b| a.test_error.total_cmp(&b.test_error).then(a.epoch.cmp(&b.epoch)))
            .expect("group is non-empty");
        t.row(&[
            rep.to_string(),
            layer.to_string(),
            last.epoch.to_string(),
            num(1.0 - last.test_error),
            best.epoch.to_string(),
            num(1.0 - best.test_error),
        ])?;
    }
    t.finish()
}

/// Eigenvalues per replicate and layer, rank 1 first.
pub fn write_spectra(path: &Path, spectra: &[(usize, Vec<LayerSpectrum>)]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["replicate", "layer", "rank", "eigenvalue"])?;
    for (rep, reports) in spectra {
        for r in reports {
            for (i, v) in r.eigenvalues.iter().enumerate() {
                t.row(&[rep.to_string(), r.layer.to_string(), (i + 1).to_string(), num(*v)])?;
            }
        }
    }
    t.finish()
}

/// Power-law fit and summary statistics per replicate and layer.
pub fn write_spectrum_fits(path: &Path, spectra: &[(usize, Vec<LayerSpectrum>)]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["replicate", "layer", "alpha", "r_squared", "top10_fraction", "dimensionality"])?;
    for (rep, reports) in spectra {
        for r in reports {
            let s = r.stats;
            t.row(&[
                rep.to_string(),
                r.layer.to_string(),
                opt(s.map(|s| s.alpha)),
                opt(s.map(|s| s.r_squared)),
                opt(s.map(|s| s.top10_fraction)),
                opt(s.map(|s| s.dimensionality)),
            ])?;
        }
    }
    t.finish()
}

pub fn write_theory(path: &Path, rows: &[TheoryRow]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["kind", "effective_n", "alpha", "d_exact", "d_integral", "d_zeta"])?;
    for r in rows {
        t.row(&[
            r.kind.as_str().to_string(),
            r.effective_n.to_string(),
            num(r.alpha),
            num(r.d_exact),
            num(r.d_integral),
            opt(r.d_zeta),
        ])?;
    }
    t.finish()
}

pub fn write_effective_n(path: &Path, fits: &[EffectiveNFit]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["kind", "configured_n", "configured_sse", "best_n", "best_sse"])?;
    for f in fits {
        t.row(&[
            f.kind.as_str().to_string(),
            f.configured_n.to_string(),
            num(f.configured_sse),
            f.best_n.to_string(),
            num(f.sse),
        ])?;
    }
    t.finish()
}

/// Measured (α, D) points: `kind,epsilon,layer,alpha_mean,alpha_se,dim_mean,dim_se`.
pub fn write_dimensionality_points(path: &Path, rows: &[AggregateRow]) -> Result<PathBuf, HarnessError> {
    let mut sorted: Vec<&AggregateRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.condition
            .cmp(&b.condition)
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.layer.cmp(&b.layer))
    });
    let mut t = Table::create(path, &["kind", "epsilon", "layer", "alpha_mean", "alpha_se", "dim_mean", "dim_se"])?;
    for r in sorted {
        t.row(&[
            r.condition.as_str().to_string(),
            num(r.epsilon),
            r.layer.to_string(),
            mean(r.alpha),
            se(r.alpha),
            mean(r.dimensionality),
            se(r.dimensionality),
        ])?;
    }
    t.finish()
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to regenerate a run's tables: the configuration, the
/// derived seeds and the data fingerprint. No timestamps, so identical runs
/// give identical manifests.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seeds: Vec<ReplicateSeeds>,
    pub data_fingerprint: Option<String>,
    pub deterministic: bool,
    pub parallel_feature: bool,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, data_fingerprint: Option<String>, deterministic: bool) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: cfg.clone(),
            config_sha256: cfg.digest(),
            seeds: (0..cfg.replicates).map(|r| ReplicateSeeds::new(cfg.base_seed, r)).collect(),
            data_fingerprint,
            deterministic,
            parallel_feature: crate::parallel::is_parallel_available(),
            outputs: Vec::new(),
        }
    }

    /// Records `files` (relative to `dir` when possible) with their hashes.
    pub fn add_outputs(&mut self, dir: &Path, files: &[PathBuf]) -> Result<(), HarnessError> {
        for f in files {
            let bytes = std::fs::read(f).map_err(|source| HarnessError::Io {
                path: f.display().to_string(),
                source,
            })?;
            let name = f.strip_prefix(dir).unwrap_or(f).display().to_string();
            self.outputs.push(OutputFile {
                file: name,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf, HarnessError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path.to_path_buf())
    }
}
