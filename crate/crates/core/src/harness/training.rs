use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, HarnessError, ReplicateSeeds};
use crate::data::{LabeledDataset, MnistDir};
use crate::network::{
    accuracy_from_predictions, learning_rate, sgd_epoch, test_accuracy, CheckpointMeta, LocalErrorNet, NetworkError,
};
use crate::numerics::Rng;
use crate::parallel;

/// Train and test sets plus a content fingerprint used for cache keys.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub fingerprint: String,
}

impl Datasets {
    pub fn new(train: LabeledDataset, test: LabeledDataset) -> Self {
        let mut h = Sha256::new();
        for ds in [&train, &test] {
            h.update((ds.len() as u64).to_le_bytes());
            h.update((ds.width() as u64).to_le_bytes());
            h.update(ds.labels());
            for v in ds.images().data() {
                h.update(v.to_le_bytes());
            }
        }
        Self {
            train,
            test,
            fingerprint: hex::encode(h.finalize()),
        }
    }

    pub fn load(dir: &MnistDir) -> Result<Self, HarnessError> {
        Ok(Self::new(dir.train()?, dir.test()?))
    }
}

/// One point of a learning curve; `layer` is 1-based. Epoch 0 is the
/// untrained network, evaluated on the full training set. Later epochs report
/// the error on each training batch just before its update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub replicate: usize,
    pub epoch: usize,
    pub layer: usize,
    pub learning_rate: f64,
    pub train_error: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug)]
pub struct Member {
    pub seeds: ReplicateSeeds,
    pub net: LocalErrorNet,
}

impl Member {
    /// Loads a checkpoint. The stored net and shuffle seeds are kept; stimulus
    /// and noise seeds are derived from `base_seed` and the stored replicate.
    pub fn load(path: &Path, base_seed: u64) -> Result<Self, HarnessError> {
        let (net, meta) = LocalErrorNet::load_checkpoint(path)?;
        let mut seeds = ReplicateSeeds::new(base_seed, meta.replicate);
        seeds.net = meta.net_seed;
        seeds.shuffle = meta.shuffle_seed;
        Ok(Self { seeds, net })
    }
}

/// Trained replicates in replicate order.
#[derive(Clone, Debug, Default)]
pub struct Ensemble {
    pub members: Vec<Member>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub ensemble: Ensemble,
    pub curves: Vec<CurveRow>,
}

impl TrainingOutcome {
    /// Final-epoch test accuracy of every layer, per replicate.
    pub fn final_accuracy(&self) -> Vec<Vec<f64>> {
        self.accuracy_by(|rows| rows.iter().max_by_key(|r| r.epoch).map(|r| 1.0 - r.test_error))
    }

    /// Best test accuracy over epochs (early-stopping view), per replicate.
    pub fn best_accuracy(&self) -> Vec<Vec<f64>> {
        self.accuracy_by(|rows| rows.iter().map(|r| 1.0 - r.test_error).reduce(f64::max))
    }

    fn accuracy_by(&self, pick: impl Fn(&[&CurveRow]) -> Option<f64>) -> Vec<Vec<f64>> {
        self.ensemble
            .members
            .iter()
            .map(|m| {
                (1..=m.net.depth())
                    .map(|layer| {
                        let rows: Vec<&CurveRow> = self
                            .curves
                            .iter()
                            .filter(|c| c.replicate == m.seeds.replicate && c.layer == layer)
                            .collect();
                        pick(&rows).unwrap_or(f64::NAN)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Trains one replicate from scratch, recording its learning curves.
pub fn train_replicate(
    cfg: &ExperimentConfig,
    data: &Datasets,
    replicate: usize,
) -> Result<(Member, Vec<CurveRow>), HarnessError> {
    let seeds = ReplicateSeeds::new(cfg.base_seed, replicate);
    let mut net_cfg = cfg.net.clone();
    net_cfg.seed = seeds.net;
    let mut net = LocalErrorNet::new(&net_cfg)?;
    let mut rng = Rng::new(seeds.shuffle);
    let diverged = |cause: NetworkError| HarnessError::Divergence { replicate, cause };

    let mut curves = Vec::with_capacity((cfg.train.epochs + 1) * net.depth());
    let train0 = accuracy_from_predictions(&net.predict(data.train.images())?, data.train.labels());
    let test0 = test_accuracy(&net, &data.test)?;
    push_epoch(&mut curves, replicate, 0, learning_rate(&cfg.train, 0), &train0.iter().map(|a| 1.0 - a).collect::<Vec<_>>(), &test0);

    for epoch in 0..cfg.train.epochs {
        let eta = learning_rate(&cfg.train, epoch);
        let train_err = sgd_epoch(&mut net, &data.train, cfg.train.batch_size, eta, &mut rng).map_err(diverged)?;
        let test_acc = test_accuracy(&net, &data.test)?;
        log::info!(
            "replicate {replicate} epoch {}: best test accuracy {:.4}",
            epoch + 1,
            test_acc.iter().copied().fold(0.0, f64::max)
        );
        push_epoch(&mut curves, replicate, epoch + 1, eta, &train_err, &test_acc);
    }
    Ok((Member { seeds, net }, curves))
}

fn push_epoch(curves: &mut Vec<CurveRow>, replicate: usize, epoch: usize, eta: f64, train_err: &[f64], test_acc: &[f64]) {
    for (l, (&tr, &acc)) in train_err.iter().zip(test_acc).enumerate() {
        curves.push(CurveRow {
            replicate,
            epoch,
            layer: l + 1,
            learning_rate: eta,
            train_error: tr,
            test_error: 1.0 - acc,
        });
    }
}

/// Trains `cfg.replicates` networks, concurrently when parallelism is
/// available. With `cache`, finished replicates are stored under a key of
/// their full configuration and the data fingerprint, and reused on later
/// runs.
pub fn run_training(cfg: &ExperimentConfig, data: &Datasets, cache: Option<&Path>) -> Result<TrainingOutcome, HarnessError> {
    cfg.validate()?;
    let results = parallel::map_indices(cfg.replicates, |r| match cache {
        Some(dir) => cached_replicate(cfg, data, r, dir),
        None => train_replicate(cfg, data, r),
    });
    let mut ensemble = Ensemble::default();
    let mut curves = Vec::new();
    for res in results {
        let (member, c) = res?;
        ensemble.members.push(member);
        curves.extend(c);
    }
    Ok(TrainingOutcome { ensemble, curves })
}

/// Cache key: everything that determines a replicate's trained weights.
pub fn replicate_cache_key(cfg: &ExperimentConfig, data: &Datasets, replicate: usize) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        version: u32,
        net: &'a crate::network::NetConfig,
        train: &'a crate::network::TrainConfig,
        seeds: ReplicateSeeds,
        data: &'a str,
    }
    let key = Key {
        version: 1,
        net: &cfg.net,
        train: &cfg.train,
        seeds: ReplicateSeeds::new(cfg.base_seed, replicate),
        data: &data.fingerprint,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("key serializes")))
}

fn cache_paths(dir: &Path, key: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{key}.leck")), dir.join(format!("{key}.curves.json")))
}

fn cached_replicate(
    cfg: &ExperimentConfig,
    data: &Datasets,
    replicate: usize,
    dir: &Path,
) -> Result<(Member, Vec<CurveRow>), HarnessError> {
    let key = replicate_cache_key(cfg, data, replicate);
    let (ckpt, curves_path) = cache_paths(dir, &key);
    if ckpt.exists() && curves_path.exists() {
        let loaded = LocalErrorNet::load_checkpoint(&ckpt).ok().and_then(|(net, _)| {
            let text = std::fs::read_to_string(&curves_path).ok()?;
            let curves: Vec<CurveRow> = serde_json::from_str(&text).ok()?;
            Some((net, curves))
        });
        if let Some((net, curves)) = loaded {
            log::info!("replicate {replicate}: reusing cached training {key}");
            let seeds = ReplicateSeeds::new(cfg.base_seed, replicate);
            return Ok((Member { seeds, net }, curves));
        }
        log::warn!("replicate {replicate}: unreadable cache entry {key}, retraining");
    }
    let (member, curves) = train_replicate(cfg, data, replicate)?;
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    member.net.save_checkpoint(&checkpoint_meta(cfg, &member), &ckpt)?;
    let json = serde_json::to_string(&curves)?;
    std::fs::write(&curves_path, json).map_err(|source| HarnessError::Io {
        path: curves_path.display().to_string(),
        source,
    })?;
    Ok((member, curves))
}

pub fn checkpoint_meta(cfg: &ExperimentConfig, member: &Member) -> CheckpointMeta {
    CheckpointMeta {
        net_seed: member.seeds.net,
        shuffle_seed: member.seeds.shuffle,
        replicate: member.seeds.replicate,
        epochs_trained: cfg.train.epochs,
        train: Some(cfg.train.clone()),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::SyntheticBlobs;
    use crate::network::{NetConfig, TrainConfig};

    pub(crate) fn blob_data() -> Datasets {
        let gen = SyntheticBlobs {
            count: 120,
            width: 16,
            noise: 0.3,
        };
        let (train, test) = gen.generate_split(80, &mut Rng::new(1));
        Datasets::new(train, test)
    }

    pub(crate) fn blob_config(replicates: usize, epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            net: NetConfig {
                input_width: 16,
                std_j: 0.5,
                ..NetConfig::uniform(3, 12, 0)
            },
            train: TrainConfig {
                epochs,
                batch_size: 10,
                eta0: 0.5,
                ..TrainConfig::default()
            },
            replicates,
            k_stimuli: 60,
            epsilon_grid: vec![0.5, 1.0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_epochs_gives_only_untrained_rows() {
        let data = blob_data();
        let out = run_training(&blob_config(1, 0), &data, None).unwrap();
        assert_eq!(out.curves.len(), 3);
        assert!(out.curves.iter().all(|c| c.epoch == 0));
    }

    #[test]
    fn replicate_zero_is_stable_across_runs_and_counts() {
        let data = blob_data();
        let a = run_training(&blob_config(2, 2), &data, None).unwrap();
        let b = run_training(&blob_config(1, 2), &data, None).unwrap();
        assert_eq!(a.ensemble.members[0].net, b.ensemble.members[0].net);
        assert_ne!(a.ensemble.members[0].net, a.ensemble.members[1].net);
        let rows0: Vec<_> = a.curves.iter().filter(|c| c.replicate == 0).cloned().collect();
        assert_eq!(rows0, b.curves);
        assert_eq!(a.curves.len(), 2 * 3 * 3);
    }

    #[test]
    fn training_improves_blobs_and_keeps_classifiers() {
        let data = blob_data();
        let cfg = blob_config(1, 8);
        let out = run_training(&cfg, &data, None).unwrap();
        let mut untrained_cfg = cfg.net.clone();
        untrained_cfg.seed = out.ensemble.members[0].seeds.net;
        let untrained = LocalErrorNet::new(&untrained_cfg).unwrap();
        assert_eq!(untrained.classifier_digest(), out.ensemble.members[0].net.classifier_digest());
        let best = out.best_accuracy()[0].iter().copied().fold(0.0, f64::max);
        assert!(best > 0.85, "{best}");
        let fin = out.final_accuracy();
        assert_eq!(fin[0].len(), 3);
    }

    #[test]
    fn cache_round_trip() {
        let data = blob_data();
        let cfg = blob_config(1, 1);
        let dir = tempfile::tempdir().unwrap();
        let a = run_training(&cfg, &data, Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
        let b = run_training(&cfg, &data, Some(dir.path())).unwrap();
        let key = replicate_cache_key(&cfg, &data, 0);
        let loaded = Member::load(&dir.path().join(format!("{key}.leck")), cfg.base_seed).unwrap();
        assert_eq!(loaded.seeds, a.ensemble.members[0].seeds);
        assert_eq!(a.ensemble.members[0].net, b.ensemble.members[0].net);
        assert_eq!(a.curves, b.curves);
        let mut other = cfg.clone();
        other.train.eta0 = 0.2;
        assert_ne!(replicate_cache_key(&cfg, &data, 0), replicate_cache_key(&other, &data, 0));
        assert_ne!(replicate_cache_key(&cfg, &data, 0), replicate_cache_key(&cfg, &data, 1));
    }
}
