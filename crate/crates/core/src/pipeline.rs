//! End-to-end experiment driver.
//!
//! Stages run in a fixed order and communicate only through files under
//! the output root, so any stage can be skipped when its outputs already
//! exist.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::attack::{run_attack, AttackReport};
use crate::checkpoint::file_digest;
use crate::config::ExperimentConfig;
use crate::dataset::{self, DatasetManifest, LoadedManifest, MixSpec, RealSelection};
use crate::error::{arg_err, Error, Result};
use crate::frechet::{distance_matrix, feature_sets, render_table, DistanceMatrix};
use crate::gan::{derive_seed, GanModel};
use crate::image::ImageBatch;
use crate::io_util::{create_dir_all, write_atomic};
use crate::oracle::{IdentityFactors, OracleWorld, N_IDENTITIES};
use crate::providers::{self, OracleEmbedder};
use crate::recognition::{build_protocol, evaluate_verification, train_recognizer, Recognizer, VerificationProtocol, VerificationResult};
use crate::training::{self, AuxModels, OracleSource, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainGan,
    GenDataset,
    TrainRecognizer,
    EvalVerification,
    Attack,
    Frechet,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainGan,
        Stage::GenDataset,
        Stage::TrainRecognizer,
        Stage::EvalVerification,
        Stage::Attack,
        Stage::Frechet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainGan => "train-gan",
            Stage::GenDataset => "gen-dataset",
            Stage::TrainRecognizer => "train-recognizer",
            Stage::EvalVerification => "eval-verification",
            Stage::Attack => "attack",
            Stage::Frechet => "frechet",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| arg_err!("unknown stage {s:?}"))
    }
}

/// File locations under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn gan(&self) -> TrainOutput {
        TrainOutput::new(self.root.join("gan"))
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }
    pub fn oracle_real(&self) -> PathBuf {
        self.root.join("oracle").join("real")
    }
    pub fn oracle_validation(&self) -> PathBuf {
        self.root.join("oracle").join("validation")
    }
    pub fn oracle_test(&self) -> PathBuf {
        self.root.join("oracle").join("test")
    }
    pub fn validation_protocol(&self) -> PathBuf {
        self.root.join("protocols").join("validation.txt")
    }
    pub fn test_protocol(&self) -> PathBuf {
        self.root.join("protocols").join("test.txt")
    }
    pub fn training_set(&self) -> PathBuf {
        self.root.join("training_set").join(dataset::MANIFEST_FILE)
    }
    pub fn recognizer(&self) -> PathBuf {
        self.root.join("recognizer").join("recognizer.safetensors")
    }
    pub fn verification(&self) -> PathBuf {
        self.root.join("verification")
    }
    pub fn attack(&self) -> PathBuf {
        self.root.join("attack")
    }
    pub fn frechet(&self) -> PathBuf {
        self.root.join("frechet")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }
    pub fn digests(&self) -> PathBuf {
        self.root.join("digests.txt")
    }
}

/// Sub-seeds of the global seed, one per consumer.
mod seeds {
    pub const REAL_SOURCE: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const ORACLE_SPLIT: u64 = 3;
    pub const ORACLE_RENDER: u64 = 4;
    pub const PROTOCOLS: u64 = 5;
    pub const MIX: u64 = 6;
}

/// Oracle identities for the real, validation and test sets; disjoint.
pub fn oracle_split(cfg: &ExperimentConfig) -> Result<[Vec<IdentityFactors>; 3]> {
    let mut ids: Vec<usize> = (0..N_IDENTITIES).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seeds::ORACLE_SPLIT)));
    let r = cfg.dataset.real_identities;
    let v = cfg.recognizer.validation_identities;
    let t = cfg.recognizer.test_identities;
    let take = |range: std::ops::Range<usize>| -> Result<Vec<IdentityFactors>> { ids[range].iter().map(|&i| IdentityFactors::from_index(i)).collect() };
    Ok([take(0..r)?, take(r..r + v)?, take(r + v..r + v + t)?])
}

fn in_stage<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {stage}");
    f().map_err(|e| Error::Stage {
        stage: stage.name().into(),
        source: Box::new(e),
    })
}

pub fn stage_train_gan(cfg: &ExperimentConfig, layout: &Layout, world: &Arc<OracleWorld>) -> Result<()> {
    let p = &cfg.providers;
    let aux = AuxModels {
        embedder: providers::embedder(&p.embedder, world, p.embedder_checkpoint.as_deref().map(Path::new))?,
        pose: providers::pose_estimator(&p.pose, world, p.pose_checkpoint.as_deref().map(Path::new))?,
    };
    let source = Arc::new(OracleSource::new(world.clone(), derive_seed(cfg.seed, seeds::REAL_SOURCE)));
    training::train(cfg.gan.clone(), &cfg.train, &cfg.losses, &aux, source, &layout.gan(), None)?;
    Ok(())
}

pub fn stage_gen_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<DatasetManifest> {
    let ckpt = layout.gan().final_checkpoint();
    let model = GanModel::load(&ckpt)?;
    let digest = file_digest(&ckpt)?;
    dataset::generate_dataset(&model, &digest, cfg.dataset.k, cfg.dataset.m, derive_seed(cfg.seed, seeds::DATASET), &layout.synthetic())
}

/// Renders the oracle sets and protocols, mixes the training set, and
/// trains the recognizer.
pub fn stage_train_recognizer(cfg: &ExperimentConfig, layout: &Layout, world: &OracleWorld) -> Result<crate::recognition::RecognizerReport> {
    let [real, val, test] = oracle_split(cfg)?;
    let m = cfg.dataset.real_m;
    let render_seed = derive_seed(cfg.seed, seeds::ORACLE_RENDER);
    let sets = [(&real, layout.oracle_real()), (&val, layout.oracle_validation()), (&test, layout.oracle_test())];
    for (i, (ids, dir)) in sets.iter().enumerate() {
        if !ids.is_empty() {
            dataset::render_oracle_dataset(world, ids, m, derive_seed(render_seed, i as u64), dir)?;
        }
    }
    let rc = &cfg.recognizer;
    let proto_seed = derive_seed(cfg.seed, seeds::PROTOCOLS);
    let val_set = DatasetManifest::load(&layout.oracle_validation())?;
    let test_set = DatasetManifest::load(&layout.oracle_test())?;
    build_protocol(&val_set, rc.folds, rc.pairs_per_fold, derive_seed(proto_seed, 0))?.write(&layout.validation_protocol())?;
    build_protocol(&test_set, rc.folds, rc.pairs_per_fold, derive_seed(proto_seed, 1))?.write(&layout.test_protocol())?;

    let synthetic = DatasetManifest::load(&layout.synthetic())?;
    let training_manifest = if real.is_empty() {
        synthetic.with_absolute_paths()?
    } else {
        let real_set = DatasetManifest::load(&layout.oracle_real())?;
        let spec = MixSpec {
            synthetic: &synthetic,
            real: &real_set,
            real_identities: RealSelection::Count(real.len()),
        };
        dataset::mix_datasets(&spec, derive_seed(cfg.seed, seeds::MIX))?
    };
    training_manifest.write(&layout.training_set())?;
    let training_set = DatasetManifest::load(&layout.training_set())?;
    let (images, labels) = training_set.load_images()?;
    let validation = VerificationProtocol::read(&layout.validation_protocol())?.load(cfg.gan.channels)?;
    let head = crate::margin::MarginHeadConfig {
        n_classes: training_set.manifest.n_identities,
        ..rc.head.clone()
    };
    let (model, report) = train_recognizer(&images, &labels, &head, &rc.train, Some(&validation))?;
    model.save(&layout.recognizer())?;
    write_atomic(
        &layout.recognizer().with_file_name("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

pub fn stage_eval_verification(cfg: &ExperimentConfig, layout: &Layout) -> Result<VerificationResult> {
    let embedder = providers::ToyEmbedder::load(&layout.recognizer())?;
    let set = VerificationProtocol::read(&layout.test_protocol())?.load(cfg.gan.channels)?;
    let result = evaluate_verification(&embedder, &set)?;
    write_report(&layout.verification(), &result.report(), &result)?;
    Ok(result)
}

fn write_report<T: Serialize>(dir: &Path, text: &str, value: &T) -> Result<()> {
    create_dir_all(dir)?;
    write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(value)?.as_bytes())
}

/// Images and labels of the first `n` identities of a dataset.
pub fn first_identities(data: &LoadedManifest, n: usize) -> Result<(ImageBatch, Vec<usize>)> {
    let mut paths = Vec::new();
    let mut labels = Vec::new();
    for e in data.manifest.identities.iter().take(n) {
        for img in &e.images {
            paths.push(data.resolve(img));
            labels.push(e.label);
        }
    }
    Ok((ImageBatch::load_pngs(&paths, data.manifest.channels)?, labels))
}

/// Members: identities the recognizer was trained on. Non-members: held-out
/// test identities. Both populations use the same number of identities.
pub fn stage_attack(cfg: &ExperimentConfig, layout: &Layout) -> Result<AttackReport> {
    let model = Recognizer::load(&layout.recognizer())?;
    let train_set = DatasetManifest::load(&layout.training_set())?;
    let test_set = DatasetManifest::load(&layout.oracle_test())?;
    let n = train_set.manifest.n_identities.min(test_set.manifest.n_identities);
    let (members, labels) = first_identities(&train_set, n)?;
    let (nonmembers, _) = first_identities(&test_set, n)?;
    let report = run_attack(&model, &members, &labels, &nonmembers, cfg.attack.policy)?;
    write_report(&layout.attack(), &report.report(), &report)?;
    Ok(report)
}

/// Distances between the synthetic, oracle validation and oracle test sets
/// (plus the mixed-in real set, if any): oracle features above the
/// diagonal, recognizer embeddings below it.
pub fn stage_frechet(cfg: &ExperimentConfig, layout: &Layout, world: &Arc<OracleWorld>) -> Result<(DistanceMatrix, DistanceMatrix)> {
    let mut names = vec![("synthetic", layout.synthetic())];
    if cfg.dataset.real_identities > 0 {
        names.push(("oracle-real", layout.oracle_real()));
    }
    names.push(("oracle-validation", layout.oracle_validation()));
    names.push(("oracle-test", layout.oracle_test()));
    let mut sets = Vec::new();
    for (name, dir) in names {
        let (images, _) = DatasetManifest::load(&dir)?.load_images()?;
        sets.push((name.to_string(), images));
    }
    let generic = OracleEmbedder::new(world.clone());
    let identity = providers::ToyEmbedder::load(&layout.recognizer())?;
    let upper = distance_matrix("generic", &feature_sets(&sets, &generic)?, cfg.frechet.eps)?;
    let lower = distance_matrix("identity", &feature_sets(&sets, &identity)?, cfg.frechet.eps)?;
    write_report(&layout.frechet(), &render_table(&upper, &lower)?, &(&upper, &lower))?;
    Ok((upper, lower))
}

/// Headline numbers of a pipeline run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub verification_accuracy: Option<f64>,
    pub attack_member_fraction: Option<f64>,
    pub attack_auc: Option<f64>,
}

/// Runs every stage not listed in `skip`, then archives the resolved
/// configuration and content digests of the whole output tree.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, skip: &[Stage]) -> Result<PipelineSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let layout = Layout::new(out);
    create_dir_all(out)?;
    write_atomic(&layout.resolved_config(), cfg.to_toml()?.as_bytes())?;
    let world = providers::oracle_world(&cfg.world)?;
    let mut summary = PipelineSummary::default();
    for stage in Stage::ALL {
        if skip.contains(&stage) {
            log::info!("skipping stage {stage}");
            continue;
        }
        in_stage(stage, || match stage {
            Stage::TrainGan => stage_train_gan(&cfg, &layout, &world),
            Stage::GenDataset => stage_gen_dataset(&cfg, &layout).map(|_| ()),
            Stage::TrainRecognizer => stage_train_recognizer(&cfg, &layout, &world).map(|_| ()),
            Stage::EvalVerification => {
                summary.verification_accuracy = Some(stage_eval_verification(&cfg, &layout)?.accuracy);
                Ok(())
            }
            Stage::Attack => {
                let r = stage_attack(&cfg, &layout)?;
                summary.attack_member_fraction = Some(r.member_fraction_lowest_half);
                summary.attack_auc = Some(r.auc);
                Ok(())
            }
            Stage::Frechet => stage_frechet(&cfg, &layout, &world).map(|_| ()),
        })?;
    }
    write_digests(out, &layout.digests())?;
    Ok(summary)
}

/// Hex SHA-1 of `blob <len>\0<bytes>`, as git computes for file contents.
pub fn git_blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `<digest>  <relative path>` for every file under `root`, sorted
/// by path, excluding the digest file itself.
pub fn write_digests(root: &Path, target: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.retain(|p| p != target);
    let mut rows: Vec<(String, String)> = files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/");
            Ok((rel, git_blob_digest(&bytes)))
        })
        .collect::<Result<_>>()?;
    rows.sort();
    let text: String = rows.iter().map(|(p, d)| format!("{d}  {p}\n")).collect();
    write_atomic(target, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_digest_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_digest(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_digest(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn oracle_split_is_disjoint() {
        let cfg = ExperimentConfig {
            dataset: crate::config::DatasetConfig {
                real_identities: 30,
                ..Default::default()
            },
            ..Default::default()
        };
        let [a, b, c] = oracle_split(&cfg).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (30, 25, 50));
        let all: std::collections::BTreeSet<usize> = a.iter().chain(&b).chain(&c).map(|i| i.index()).collect();
        assert_eq!(all.len(), 105);
    }
}
