use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aggregate::{AggregateRow, Condition};
use super::analysis::{clean_spectra, run_attack_sweep, run_clean_analysis, run_dimensionality_comparison};
use super::output::{
    write_aggregates, write_cells, write_curves, write_dimensionality_points, write_effective_n, write_spectra,
    write_spectrum_fits, write_sweep, write_theory, write_training_summary, write_width_aggregates, Table,
};
use super::training::{checkpoint_meta, run_training, Datasets};
use super::{ExperimentConfig, HarnessError};
use crate::attacks::AttackKind;
use crate::numerics::linfit;

/// The reproducible figure tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Figure {
    /// Learning curves per layer.
    Training,
    /// Clean eigen-spectra and power-law fits.
    Spectrum,
    /// Clean accuracy and α per layer across widths.
    Width,
    /// Gaussian ε-sweep.
    GaussianSweep,
    /// FGSM ε-sweep.
    FgsmSweep,
    /// Measured and theoretical D(α).
    Dimensionality,
}

impl Figure {
    pub const ALL: [Figure; 6] = [
        Figure::Training,
        Figure::Spectrum,
        Figure::Width,
        Figure::GaussianSweep,
        Figure::FgsmSweep,
        Figure::Dimensionality,
    ];

    pub fn from_number(n: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.number() == n)
    }

    pub fn number(self) -> u32 {
        match self {
            Figure::Training => 2,
            Figure::Spectrum => 3,
            Figure::Width => 4,
            Figure::GaussianSweep => 5,
            Figure::FgsmSweep => 6,
            Figure::Dimensionality => 7,
        }
    }

    /// Replicates used when none are requested.
    pub fn default_replicates(self) -> usize {
        match self {
            Figure::Training | Figure::Spectrum => 1,
            Figure::Width => 50,
            Figure::GaussianSweep | Figure::FgsmSweep | Figure::Dimensionality => 20,
        }
    }

    /// The configuration this figure actually runs.
    pub fn adjust(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Figure::GaussianSweep => c.attack_kinds = vec![AttackKind::Gaussian],
            Figure::FgsmSweep => c.attack_kinds = vec![AttackKind::Fgsm],
            _ => {}
        }
        c
    }
}

/// Where a pipeline reads data and writes results.
#[derive(Clone, Copy, Debug)]
pub struct RunContext<'a> {
    pub data: &'a Datasets,
    /// Optional store of trained replicates keyed by configuration.
    pub cache: Option<&'a Path>,
    pub out_dir: &'a Path,
}

/// Least-squares line of mean accuracy against mean α across ε, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAlphaFit {
    pub condition: Condition,
    pub layer: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn accuracy_alpha_fits(rows: &[AggregateRow]) -> Vec<AccuracyAlphaFit> {
    let mut keys: Vec<(Condition, usize)> = rows.iter().map(|r| (r.condition, r.layer)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(condition, layer)| {
            let (alphas, accs): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.condition == condition && r.layer == layer)
                .filter_map(|r| Some((r.alpha?.mean, r.accuracy.mean)))
                .unzip();
            let fit = linfit(&alphas, &accs).ok()?;
            Some(AccuracyAlphaFit {
                condition,
                layer,
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
                points: alphas.len(),
            })
        })
        .collect()
}

pub fn write_alpha_fits(path: &Path, fits: &[AccuracyAlphaFit]) -> Result<PathBuf, HarnessError> {
    let mut t = Table::create(path, &["kind", "layer", "points", "slope", "intercept", "r_squared"])?;
    for f in fits {
        t.row(&[
            f.condition.as_str().to_string(),
            f.layer.to_string(),
            f.points.to_string(),
            format!("{}", f.slope),
            format!("{}", f.intercept),
            format!("{}", f.r_squared),
        ])?;
    }
    t.finish()
}

/// Runs the pipeline behind `fig` end to end and returns the files written.
pub fn reproduce(fig: Figure, cfg: &ExperimentConfig, ctx: RunContext<'_>) -> Result<Vec<PathBuf>, HarnessError> {
    let cfg = fig.adjust(cfg);
    cfg.validate()?;
    let out = |name: &str| ctx.out_dir.join(format!("fig{}_{name}", fig.number()));
    let test = &ctx.data.test;
    let mut files = Vec::new();
    match fig {
        Figure::Training => {
            let trained = run_training(&cfg, ctx.data, ctx.cache)?;
            files.push(write_curves(&out("curves.csv"), &trained.curves)?);
            files.push(write_training_summary(&out("summary.csv"), &trained.curves)?);
            files.extend(save_checkpoints(&cfg, &trained.ensemble, ctx.out_dir)?);
        }
        Figure::Spectrum => {
            let trained = run_training(&cfg, ctx.data, ctx.cache)?;
            let spectra = trained
                .ensemble
                .members
                .iter()
                .map(|m| Ok((m.seeds.replicate, clean_spectra(&cfg, m, test)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            files.push(write_spectra(&out("spectrum.csv"), &spectra)?);
            files.push(write_spectrum_fits(&out("fits.csv"), &spectra)?);
            let clean = run_clean_analysis(&cfg, &trained.ensemble, test)?;
            files.push(write_aggregates(&out("layers.csv"), &clean.rows)?);
        }
        Figure::Width => {
            let mut rows = Vec::new();
            for &w in &cfg.width_sweep {
                let wc = cfg.with_width(w);
                let trained = run_training(&wc, ctx.data, ctx.cache)?;
                let clean = run_clean_analysis(&wc, &trained.ensemble, test)?;
                rows.extend(clean.rows.into_iter().map(|r| (w, r)));
            }
            files.push(write_width_aggregates(&out("width.csv"), &rows)?);
        }
        Figure::GaussianSweep | Figure::FgsmSweep => {
            let trained = run_training(&cfg, ctx.data, ctx.cache)?;
            let sweep = run_attack_sweep(&cfg, &trained.ensemble, test)?;
            files.push(write_sweep(&out("sweep.csv"), &sweep.rows)?);
            files.push(write_aggregates(&out("sweep_full.csv"), &sweep.rows)?);
            files.push(write_cells(&out("cells.csv"), &sweep.cells)?);
            files.push(write_alpha_fits(&out("accuracy_vs_alpha.csv"), &accuracy_alpha_fits(&sweep.rows))?);
        }
        Figure::Dimensionality => {
            let trained = run_training(&cfg, ctx.data, ctx.cache)?;
            let cmp = run_dimensionality_comparison(&cfg, &trained.ensemble, test)?;
            files.push(write_dimensionality_points(&out("points.csv"), &cmp.measured.rows)?);
            files.push(write_theory(&out("theory.csv"), &cmp.theory)?);
            files.push(write_effective_n(&out("effective_n.csv"), &cmp.fits)?);
        }
    }
    Ok(files)
}

/// Writes one checkpoint per member under `dir/checkpoints/`.
pub fn save_checkpoints(
    cfg: &ExperimentConfig,
    ensemble: &super::Ensemble,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let ck_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|source| HarnessError::Io {
        path: ck_dir.display().to_string(),
        source,
    })?;
    ensemble
        .members
        .iter()
        .map(|m| {
            let p = ck_dir.join(format!("replicate_{}.leck", m.seeds.replicate));
            m.net.save_checkpoint(&checkpoint_meta(cfg, m), &p)?;
            Ok(p)
        })
        .collect()
}
