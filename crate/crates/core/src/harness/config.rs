use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::attacks::{AttackKind, Protocol};
use crate::manifold::{Centering, DEFAULT_FIT_WINDOW};
use crate::network::{NetConfig, TrainConfig};
use crate::numerics::derive_seed;

/// Everything needed to reproduce an experiment. `net.seed` is ignored by the
/// ensemble pipelines: every replicate derives its own seeds from
/// `base_seed` (see [`ReplicateSeeds`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub replicates: usize,
    #[serde(default = "default_k_stimuli")]
    pub k_stimuli: usize,
    #[serde(default = "default_epsilon_grid")]
    pub epsilon_grid: Vec<f64>,
    #[serde(default = "default_attack_kinds")]
    pub attack_kinds: Vec<AttackKind>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub spectrum: SpectrumSettings,
    #[serde(default)]
    pub dimensionality: DimensionalitySettings,
    /// Layer widths compared by the width sweep.
    #[serde(default = "default_width_sweep")]
    pub width_sweep: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSettings {
    /// Leading eigenvalues used by the power-law fit.
    pub n_fit: usize,
    pub centering: Centering,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        Self {
            n_fit: DEFAULT_FIT_WINDOW,
            centering: Centering::Centered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionalitySettings {
    /// Attack strengths at which measured (α, D) points are reported.
    pub epsilons: Vec<f64>,
    /// Effective population size for the Gaussian-attack theory curve.
    pub effective_n_gaussian: usize,
    /// Effective population size for the FGSM theory curve.
    pub effective_n_fgsm: usize,
    /// α values at which theory curves are tabulated.
    pub alpha_grid: Vec<f64>,
    /// Search range for the best-fitting effective N.
    pub fit_n_min: usize,
    pub fit_n_max: usize,
}

impl Default for DimensionalitySettings {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.5, 3.0],
            effective_n_gaussian: 35,
            effective_n_fgsm: 30,
            alpha_grid: (1..=80).map(|i| i as f64 / 20.0).collect(),
            fit_n_min: 2,
            fit_n_max: 400,
        }
    }
}

fn default_k_stimuli() -> usize {
    3000
}

/// `0.1, 0.2, …, 4.0`, each the closest double to the decimal value.
pub fn default_epsilon_grid() -> Vec<f64> {
    (1..=40).map(|i| i as f64 / 10.0).collect()
}

fn default_attack_kinds() -> Vec<AttackKind> {
    AttackKind::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_width_sweep() -> Vec<usize> {
    vec![50, 100, 200]
}

impl Default for ExperimentConfig {
    /// Eight layers of 200 units trained for 30 epochs, 20 replicates.
    fn default() -> Self {
        Self {
            net: NetConfig::uniform(8, 200, 0),
            train: TrainConfig::default(),
            replicates: 20,
            k_stimuli: default_k_stimuli(),
            epsilon_grid: default_epsilon_grid(),
            attack_kinds: default_attack_kinds(),
            output_dir: default_output_dir(),
            base_seed: 0,
            protocol: Protocol::Independent,
            spectrum: SpectrumSettings::default(),
            dimensionality: DimensionalitySettings::default(),
            width_sweep: default_width_sweep(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.net.validate()?;
        self.train.validate()?;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.k_stimuli < 2 {
            return bad(format!("k_stimuli = {} must be at least 2", self.k_stimuli));
        }
        if !is_sorted_grid(&self.epsilon_grid) {
            return bad("epsilon_grid must be finite, >= 0 and strictly ascending".into());
        }
        if !is_sorted_grid(&self.dimensionality.epsilons) {
            return bad("dimensionality.epsilons must be finite, >= 0 and strictly ascending".into());
        }
        if self.attack_kinds.is_empty() {
            return bad("attack_kinds must not be empty".into());
        }
        let d = &self.dimensionality;
        if d.effective_n_gaussian < 2 || d.effective_n_fgsm < 2 || d.fit_n_min < 2 || d.fit_n_max < d.fit_n_min {
            return bad("effective N values must be >= 2 and fit_n_min <= fit_n_max".into());
        }
        if d.alpha_grid.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return bad("alpha_grid entries must be finite and >= 0".into());
        }
        if self.spectrum.n_fit < 2 || self.net.widths.iter().any(|&w| w < self.spectrum.n_fit) {
            return bad(format!(
                "spectrum.n_fit = {} needs at least 2 and at most the narrowest layer",
                self.spectrum.n_fit
            ));
        }
        if self.width_sweep.contains(&0) {
            return bad("width_sweep entries must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// This configuration with every layer set to `width`.
    pub fn with_width(&self, width: usize) -> Self {
        let mut c = self.clone();
        c.net.widths = vec![width; c.net.depth()];
        c
    }
}

fn is_sorted_grid(grid: &[f64]) -> bool {
    grid.iter().all(|e| e.is_finite() && *e >= 0.0) && grid.windows(2).all(|w| w[0] < w[1])
}

const NET_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;
const STIMULI_TAG: u64 = 3;
const NOISE_TAG: u64 = 4;

/// Seeds of one replicate: `derive_seed(base_seed, [r, purpose])`, so adding
/// replicates never changes the streams of existing ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateSeeds {
    pub replicate: usize,
    /// Initial weights.
    pub net: u64,
    /// Mini-batch order.
    pub shuffle: u64,
    /// Subsample of test images used as spectrum stimuli.
    pub stimuli: u64,
    /// Gaussian attack noise.
    pub noise: u64,
}

impl ReplicateSeeds {
    pub fn new(base_seed: u64, replicate: usize) -> Self {
        let r = replicate as u64;
        Self {
            replicate,
            net: derive_seed(base_seed, &[r, NET_TAG]),
            shuffle: derive_seed(base_seed, &[r, SHUFFLE_TAG]),
            stimuli: derive_seed(base_seed, &[r, STIMULI_TAG]),
            noise: derive_seed(base_seed, &[r, NOISE_TAG]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_forty_points() {
        let g = default_epsilon_grid();
        assert_eq!(g.len(), 40);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[39], 4.0);
        assert_eq!(g[19], 2.0);
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_minimal_form() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let minimal = r#"{"net": {"widths": [16, 16]}, "replicates": 2}"#;
        let m = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(m.k_stimuli, 3000);
        assert_eq!(m.train, TrainConfig::default());
        m.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"net": {"widths": [4]}, "replicates": 1, "bogus": 3}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(HarnessError::Config(_))));
        let nested = r#"{"net": {"widths": [4], "depth": 2}, "replicates": 1}"#;
        assert!(ExperimentConfig::from_json(nested).is_err());
    }

    #[test]
    fn invariants() {
        let ok = ExperimentConfig::default();
        let mut c = ok.clone();
        c.replicates = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.epsilon_grid = vec![0.2, 0.1];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.k_stimuli = 1;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.net.widths = vec![5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.base_seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn replicate_seeds_are_stable_and_distinct() {
        let s0 = ReplicateSeeds::new(7, 0);
        assert_eq!(s0, ReplicateSeeds::new(7, 0));
        let s1 = ReplicateSeeds::new(7, 1);
        let all = [s0.net, s0.shuffle, s0.stimuli, s0.noise, s1.net, s1.shuffle, s1.stimuli, s1.noise];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(ReplicateSeeds::new(8, 0), s0);
    }
}
