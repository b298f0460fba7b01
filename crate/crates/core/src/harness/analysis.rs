use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_cells, AggregateRow, CellResult, Condition, SpectrumStats};
use super::{Ensemble, ExperimentConfig, HarnessError, Member};
use crate::attacks::{cascade_activations, AttackKind, AttackSpec, LayerProbe, Protocol};
use crate::data::{subsample_indices, LabeledDataset};
use crate::manifold::{
    best_fit_effective_n, eigen_spectrum_with, theoretical_dimensionality, zeta_dimensionality, DimensionalityMode, ManifoldError,
    SpectrumOptions, SpectrumReport,
};
use crate::network::{classify_at_layer, relu, LocalErrorNet};
use crate::numerics::{Matrix, Rng};
use crate::parallel;

/// Per-cell results plus their replicate aggregates.
#[derive(Clone, Debug, Default)]
pub struct Analysis {
    pub cells: Vec<CellResult>,
    pub rows: Vec<AggregateRow>,
    /// Cells whose spectrum was degenerate and left out of spectral aggregates.
    pub degenerate: usize,
}

impl Analysis {
    fn from_cells(cells: Vec<CellResult>) -> Result<Self, HarnessError> {
        let degenerate = cells.iter().filter(|c| c.spectrum.is_none()).count();
        if degenerate > 0 {
            log::warn!("{degenerate} degenerate spectra excluded from aggregation");
        }
        let rows = aggregate_cells(&cells)?;
        Ok(Self { cells, rows, degenerate })
    }

    /// Aggregate row for (condition, 1-based layer, ε), if present.
    pub fn row(&self, condition: Condition, layer: usize, epsilon: f64) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.layer == layer && r.epsilon == epsilon)
    }
}

/// A condition and the strengths at which it is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionGrid {
    pub condition: Condition,
    pub epsilons: Vec<f64>,
}

impl ConditionGrid {
    pub fn clean() -> Self {
        Self {
            condition: Condition::Clean,
            epsilons: vec![0.0],
        }
    }

    pub fn attack(kind: AttackKind, epsilons: &[f64]) -> Self {
        Self {
            condition: Condition::Attack(kind),
            epsilons: epsilons.to_vec(),
        }
    }
}

/// Sorted test-set indices of the replicate's spectrum stimuli (all test
/// images when `k_stimuli` exceeds the test set).
pub fn stimulus_ids(cfg: &ExperimentConfig, member: &Member, n_test: usize) -> Result<Vec<usize>, HarnessError> {
    let k = cfg.k_stimuli.min(n_test);
    let mut ids = subsample_indices(n_test, k, &mut Rng::new(member.seeds.stimuli))?;
    ids.sort_unstable();
    Ok(ids)
}

fn spectrum_options(cfg: &ExperimentConfig) -> SpectrumOptions {
    SpectrumOptions {
        n_fit: cfg.spectrum.n_fit,
        centering: cfg.spectrum.centering,
    }
}

fn accuracy(net: &LocalErrorNet, layer: usize, act: &Matrix, labels: &[u8]) -> Result<f64, HarnessError> {
    let scores = act.matmul(net.classifier(layer))?;
    let hits = (0..scores.rows())
        .filter(|&r| classify_at_layer(scores.row(r)) == labels[r] as usize)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Spectrum of the stimulus rows of `act`; degenerate spectra become `None`.
fn spectrum(act: &Matrix, stim: &[usize], layer: usize, epsilon: f64, opts: SpectrumOptions) -> Result<Option<SpectrumReport>, HarnessError> {
    match SpectrumReport::analyze(&act.select_rows(stim), layer, epsilon, opts) {
        Ok(rep) => Ok(Some(rep)),
        Err(ManifoldError::DegenerateSpectrum(msg)) => {
            log::debug!("layer {layer} epsilon {epsilon}: {msg}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn stats(rep: &SpectrumReport) -> SpectrumStats {
    SpectrumStats {
        alpha: rep.alpha,
        r_squared: rep.r_squared,
        dimensionality: rep.dimensionality,
        top10_fraction: rep.top10_fraction,
    }
}

/// Accuracy on the whole test set and spectrum statistics on the stimulus
/// subset, for every layer of one member under every condition.
pub fn evaluate_member(
    cfg: &ExperimentConfig,
    member: &Member,
    test: &LabeledDataset,
    grids: &[ConditionGrid],
) -> Result<Vec<CellResult>, HarnessError> {
    let net = &member.net;
    let stim = stimulus_ids(cfg, member, test.len())?;
    let opts = spectrum_options(cfg);
    let replicate = member.seeds.replicate;
    let labels = test.labels();
    let cell = |layer: usize, condition: Condition, epsilon: f64, act: &Matrix| -> Result<CellResult, HarnessError> {
        Ok(CellResult {
            replicate,
            layer: layer + 1,
            condition,
            epsilon,
            accuracy: accuracy(net, layer, act, labels)?,
            spectrum: spectrum(act, &stim, layer + 1, epsilon, opts)?.as_ref().map(stats),
        })
    };

    let inputs = net.layer_inputs(test.images())?;
    let ids: Vec<usize> = (0..test.len()).collect();
    let per_layer = parallel::map_indices(net.depth(), |l| -> Result<Vec<CellResult>, HarnessError> {
        let mut out = Vec::new();
        for grid in grids {
            match grid.condition {
                Condition::Clean => {
                    let act = relu(&inputs[l].matmul(net.weight(l))?);
                    out.push(cell(l, Condition::Clean, 0.0, &act)?);
                }
                Condition::Attack(_) if cfg.protocol == Protocol::Cascade => {}
                Condition::Attack(kind) => {
                    let probe = LayerProbe::new(net, l, &inputs[l], labels, &ids, kind, member.seeds.noise)?;
                    for &eps in &grid.epsilons {
                        out.push(cell(l, grid.condition, eps, &probe.activations(eps))?);
                    }
                }
            }
        }
        Ok(out)
    });
    let mut cells = Vec::new();
    for part in per_layer {
        cells.extend(part?);
    }

    if cfg.protocol == Protocol::Cascade {
        for grid in grids {
            let Condition::Attack(kind) = grid.condition else {
                continue;
            };
            for &eps in &grid.epsilons {
                let spec = AttackSpec {
                    kind,
                    epsilon: eps,
                    seed: member.seeds.noise,
                };
                for (l, act) in cascade_activations(net, test, &spec)?.iter().enumerate() {
                    cells.push(cell(l, grid.condition, eps, act)?);
                }
            }
        }
    }
    Ok(cells)
}

fn analyze_ensemble(
    cfg: &ExperimentConfig,
    ensemble: &Ensemble,
    test: &LabeledDataset,
    grids: &[ConditionGrid],
) -> Result<Analysis, HarnessError> {
    let parts = parallel::map_slice(&ensemble.members, |m| evaluate_member(cfg, m, test, grids));
    let mut cells = Vec::new();
    for p in parts {
        cells.extend(p?);
    }
    Analysis::from_cells(cells)
}

/// Clean per-layer accuracy, α, D and top-10 variance fraction.
pub fn run_clean_analysis(cfg: &ExperimentConfig, ensemble: &Ensemble, test: &LabeledDataset) -> Result<Analysis, HarnessError> {
    analyze_ensemble(cfg, ensemble, test, &[ConditionGrid::clean()])
}

/// Every configured attack kind over the ε grid.
pub fn run_attack_sweep(cfg: &ExperimentConfig, ensemble: &Ensemble, test: &LabeledDataset) -> Result<Analysis, HarnessError> {
    let grids: Vec<ConditionGrid> = cfg
        .attack_kinds
        .iter()
        .map(|&k| ConditionGrid::attack(k, &cfg.epsilon_grid))
        .collect();
    analyze_ensemble(cfg, ensemble, test, &grids)
}

/// Eigenvalues of one layer and, when the spectrum allows it, their fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    /// 1-based.
    pub layer: usize,
    pub eigenvalues: Vec<f64>,
    pub stats: Option<SpectrumStats>,
}

/// Clean spectra of one member on its stimulus set, one entry per layer.
pub fn clean_spectra(cfg: &ExperimentConfig, member: &Member, test: &LabeledDataset) -> Result<Vec<LayerSpectrum>, HarnessError> {
    let stim = stimulus_ids(cfg, member, test.len())?;
    let acts = member.net.layer_activations(&test.images().select_rows(&stim))?;
    let opts = spectrum_options(cfg);
    acts.iter()
        .enumerate()
        .map(|(l, a)| {
            let eigenvalues = eigen_spectrum_with(a, opts.centering)?;
            let stats = match SpectrumReport::from_eigenvalues(eigenvalues.clone(), l + 1, 0.0, opts.n_fit) {
                Ok(rep) => Some(stats(&rep)),
                Err(ManifoldError::DegenerateSpectrum(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(LayerSpectrum {
                layer: l + 1,
                eigenvalues,
                stats,
            })
        })
        .collect()
}

/// One tabulated point of the theoretical D(α) curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub kind: AttackKind,
    pub effective_n: usize,
    pub alpha: f64,
    pub d_exact: f64,
    pub d_integral: f64,
    /// Large-N limit, defined for α > 1 only.
    pub d_zeta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveNFit {
    pub kind: AttackKind,
    /// The configured effective N for this panel.
    pub configured_n: usize,
    pub best_n: usize,
    pub sse: f64,
    /// Squared error of the configured N on the same points.
    pub configured_sse: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DimensionalityComparison {
    pub measured: Analysis,
    pub theory: Vec<TheoryRow>,
    pub fits: Vec<EffectiveNFit>,
}

pub fn effective_n(cfg: &ExperimentConfig, kind: AttackKind) -> usize {
    match kind {
        AttackKind::Gaussian => cfg.dimensionality.effective_n_gaussian,
        AttackKind::Fgsm => cfg.dimensionality.effective_n_fgsm,
    }
}

/// Theoretical curves for `n` over the configured α grid.
pub fn theory_curve(kind: AttackKind, n: usize, alphas: &[f64]) -> Result<Vec<TheoryRow>, HarnessError> {
    alphas
        .iter()
        .map(|&alpha| {
            Ok(TheoryRow {
                kind,
                effective_n: n,
                alpha,
                d_exact: theoretical_dimensionality(alpha, n, DimensionalityMode::ExactSum)?,
                d_integral: theoretical_dimensionality(alpha, n, DimensionalityMode::Integral)?,
                d_zeta: if alpha > 1.0 { Some(zeta_dimensionality(alpha)?) } else { None },
            })
        })
        .collect()
}

/// Measured (α, D) per layer at the configured strengths, theory curves at
/// the configured effective N, and the N that best fits the measurements.
pub fn run_dimensionality_comparison(
    cfg: &ExperimentConfig,
    ensemble: &Ensemble,
    test: &LabeledDataset,
) -> Result<DimensionalityComparison, HarnessError> {
    let d = &cfg.dimensionality;
    let grids: Vec<ConditionGrid> = cfg
        .attack_kinds
        .iter()
        .map(|&k| ConditionGrid::attack(k, &d.epsilons))
        .collect();
    let measured = analyze_ensemble(cfg, ensemble, test, &grids)?;
    let mut theory = Vec::new();
    let mut fits = Vec::new();
    for &kind in &cfg.attack_kinds {
        let n = effective_n(cfg, kind);
        theory.extend(theory_curve(kind, n, &d.alpha_grid)?);
        let points: Vec<(f64, f64)> = measured
            .rows
            .iter()
            .filter(|r| r.condition == Condition::Attack(kind))
            .filter_map(|r| Some((r.alpha?.mean, r.dimensionality?.mean)))
            .collect();
        if points.is_empty() {
            continue;
        }
        let (best_n, sse) = best_fit_effective_n(&points, d.fit_n_min..=d.fit_n_max)?;
        let (_, configured_sse) = best_fit_effective_n(&points, n..=n)?;
        fits.push(EffectiveNFit {
            kind,
            configured_n: n,
            best_n,
            sse,
            configured_sse,
        });
    }
    Ok(DimensionalityComparison { measured, theory, fits })
}
