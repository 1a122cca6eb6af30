//! Labelled identity datasets on disk: export from a generator, render from
//! the oracle world, and merge with a second corpus.
//!
//! Layout is `<root>/id_<label>/img_<j>.png` plus `<root>/manifest.json`.
//! The manifest is written last, so a readable manifest implies a complete
//! dataset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, config_err, Error, Result};
use crate::gan::{derive_seed, GanModel};
use crate::image::ImageBatch;
use crate::io_util::{read_to_string, write_atomic};
use crate::oracle::{IdentityFactors, OracleWorld};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where the images of a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Generator { checkpoint_digest: String },
    Oracle,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub label: usize,
    /// SHA-256 of the identity code (little-endian f32 bytes of `z1`, or the
    /// oracle identity index for rendered sets).
    pub z1_digest: String,
    /// Euclidean distance to the closest other identity code in the same
    /// export, when codes are continuous.
    pub nearest_z1_distance: Option<f64>,
    /// Oracle identity index, when known.
    pub oracle_identity: Option<usize>,
    /// Image paths, relative to the manifest's directory unless absolute.
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_identities: usize,
    /// Images per identity; `None` when identities differ in count.
    pub realisations: Option<usize>,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub source: DatasetSource,
    pub identities: Vec<IdentityEntry>,
}

impl DatasetManifest {
    pub fn n_images(&self) -> usize {
        self.identities.iter().map(|e| e.images.len()).sum()
    }

    /// Structural checks: version, counts, labels `0..K` each exactly once.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(config_err!(
                "manifest format version {} is not {MANIFEST_FORMAT_VERSION}",
                self.format_version
            ));
        }
        if self.identities.len() != self.n_identities {
            return Err(config_err!(
                "manifest lists {} identities but declares {}",
                self.identities.len(),
                self.n_identities
            ));
        }
        let labels: BTreeSet<usize> = self.identities.iter().map(|e| e.label).collect();
        if labels.len() != self.n_identities || labels.iter().next_back().is_some_and(|&l| l >= self.n_identities) {
            return Err(config_err!("labels must be exactly 0..{}", self.n_identities));
        }
        for e in &self.identities {
            if e.images.is_empty() {
                return Err(config_err!("identity {} has no images", e.label));
            }
            if let Some(m) = self.realisations {
                if e.images.len() != m {
                    return Err(config_err!("identity {} has {} images, expected {m}", e.label, e.images.len()));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; writing it back after a read gives the same bytes.
    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_text()?.as_bytes())
    }

    /// Reads a manifest file (or `<dir>/manifest.json` for a directory) and
    /// checks that every referenced image exists.
    pub fn load(path: &Path) -> Result<LoadedManifest> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest = Self::from_text(&read_to_string(&file)?, &file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedManifest { manifest, root };
        for (p, _) in loaded.samples() {
            if !p.is_file() {
                return Err(Error::format(&file, format!("referenced image {} is missing", p.display())));
            }
        }
        Ok(loaded)
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl LoadedManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// The same manifest with every image path made absolute.
    pub fn with_absolute_paths(&self) -> Result<DatasetManifest> {
        let mut m = self.manifest.clone();
        for e in &mut m.identities {
            for img in &mut e.images {
                *img = absolute_string(&self.resolve(img))?;
            }
        }
        Ok(m)
    }

    /// `(path, label)` for every image, identities in manifest order.
    pub fn samples(&self) -> Vec<(PathBuf, usize)> {
        self.manifest
            .identities
            .iter()
            .flat_map(|e| e.images.iter().map(move |i| (self.resolve(i), e.label)))
            .collect()
    }

    /// All images with their labels.
    pub fn load_images(&self) -> Result<(ImageBatch, Vec<usize>)> {
        let samples = self.samples();
        let paths: Vec<&PathBuf> = samples.iter().map(|(p, _)| p).collect();
        let images = ImageBatch::load_pngs(&paths, self.manifest.channels)?;
        Ok((images, samples.iter().map(|(_, l)| *l).collect()))
    }
}

/// Post-processing applied to each identity's images before they are
/// written. Real-data pipelines would align and crop here.
pub type CropHook = fn(ImageBatch) -> Result<ImageBatch>;

/// The default hook: images are already canonical.
pub fn no_crop(images: ImageBatch) -> Result<ImageBatch> {
    Ok(images)
}

fn image_rel_path(label: usize, j: usize) -> String {
    format!("id_{label}/img_{j}.png")
}

fn code_digest(code: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in code {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn nearest_distances(codes: &[Vec<f32>]) -> Vec<Option<f64>> {
    codes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            codes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt())
                .min_by(f64::total_cmp)
        })
        .collect()
}

/// Writes every identity in parallel. On failure the error names the last
/// label up to which all identities were written.
fn write_identities<F>(k: usize, out_dir: &Path, crop: CropHook, render: F) -> Result<Vec<Vec<String>>>
where
    F: Fn(usize) -> Result<ImageBatch> + Sync,
{
    let results: Vec<Result<Vec<String>>> = (0..k)
        .into_par_iter()
        .map(|label| {
            let images = crop(render(label)?)?;
            (0..images.len())
                .map(|j| {
                    let rel = image_rel_path(label, j);
                    images.save_png(j, &out_dir.join(&rel))?;
                    Ok(rel)
                })
                .collect()
        })
        .collect();
    let mut paths = Vec::with_capacity(k);
    for (label, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err(e) => {
                return Err(Error::PartialOutput {
                    last_completed: label.checked_sub(1),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(paths)
}

fn normal_code<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// Identity codes and per-image `(z2, noise key)` draws for identity `label`.
fn identity_draws(seed: u64, label: usize, m: usize, n_z: usize) -> (Vec<f32>, Vec<Vec<f32>>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label as u64));
    let z1 = normal_code(&mut rng, n_z);
    let z2: Vec<Vec<f32>> = (0..m).map(|_| normal_code(&mut rng, n_z)).collect();
    let keys = (0..m).map(|_| rng.next_u64()).collect();
    (z1, z2, keys)
}

/// Exports `k` identities with `m` images each: one `z1` per identity, a
/// fresh `z2` and noise key per image.
pub fn generate_dataset(
    model: &GanModel,
    checkpoint_digest: &str,
    k: usize,
    m: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_dataset_with(model, checkpoint_digest, k, m, seed, out_dir, no_crop)
}

pub fn generate_dataset_with(
    model: &GanModel,
    checkpoint_digest: &str,
    k: usize,
    m: usize,
    seed: u64,
    out_dir: &Path,
    crop: CropHook,
) -> Result<DatasetManifest> {
    if k == 0 || m == 0 {
        return Err(arg_err!("need at least one identity and one realisation, got K={k}, M={m}"));
    }
    let cfg = model.config();
    let n_z = cfg.n_z;
    let codes: Vec<Vec<f32>> = (0..k).map(|l| identity_draws(seed, l, 0, n_z).0).collect();
    let paths = write_identities(k, out_dir, crop, |label| {
        let (z1, z2, keys) = identity_draws(seed, label, m, n_z);
        let z1 = Tensor::from_vec(z1.repeat(m), (m, n_z), &candle_core::Device::Cpu)?;
        let z2 = crate::gan::stack_codes(z2.iter())?;
        model.generate(&z1, &z2, Some(&keys))
    })?;
    let nearest = nearest_distances(&codes);
    let identities = paths
        .into_iter()
        .enumerate()
        .map(|(label, images)| IdentityEntry {
            label,
            z1_digest: code_digest(&codes[label]),
            nearest_z1_distance: nearest[label],
            oracle_identity: None,
            images,
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        n_identities: k,
        realisations: Some(m),
        resolution: cfg.resolution,
        channels: cfg.channels,
        seed,
        source: DatasetSource::Generator {
            checkpoint_digest: checkpoint_digest.to_string(),
        },
        identities,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Renders `m` random poses of each given oracle identity. Label `i`
/// corresponds to `identities[i]`.
pub fn render_oracle_dataset(
    world: &OracleWorld,
    identities: &[IdentityFactors],
    m: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if identities.is_empty() || m == 0 {
        return Err(arg_err!("need at least one identity and one realisation"));
    }
    let distinct: BTreeSet<usize> = identities.iter().map(|i| i.index()).collect();
    if distinct.len() != identities.len() {
        return Err(arg_err!("oracle identities must be distinct"));
    }
    let paths = write_identities(identities.len(), out_dir, no_crop, |label| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label as u64));
        let items: Vec<_> = (0..m).map(|_| (identities[label].clone(), world.sample_pose(&mut rng))).collect();
        world.render_batch(&items)
    })?;
    let entries = paths
        .into_iter()
        .enumerate()
        .map(|(label, images)| {
            let index = identities[label].index();
            IdentityEntry {
                label,
                z1_digest: hex::encode(Sha256::digest(format!("oracle:{index}").as_bytes())),
                nearest_z1_distance: None,
                oracle_identity: Some(index),
                images,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        n_identities: identities.len(),
        realisations: Some(m),
        resolution: world.resolution(),
        channels: 3,
        seed,
        source: DatasetSource::Oracle,
        identities: entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn absolute_string(p: &Path) -> Result<String> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    Ok(abs.to_string_lossy().into_owned())
}

/// How many real identities to include in a mix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealSelection {
    Count(usize),
    Fraction(f64),
}

pub struct MixSpec<'a> {
    pub synthetic: &'a LoadedManifest,
    pub real: &'a LoadedManifest,
    pub real_identities: RealSelection,
}

/// Merges a seeded subset of the real identities with all synthetic ones.
/// Real identities take labels `0..R` in their original order; synthetic
/// labels follow, offset by `R`. Paths in the result are absolute.
pub fn mix_datasets(spec: &MixSpec, seed: u64) -> Result<DatasetManifest> {
    let (syn, real) = (&spec.synthetic.manifest, &spec.real.manifest);
    if syn.resolution != real.resolution || syn.channels != real.channels {
        return Err(config_err!(
            "cannot mix {}x{}x{} images with {}x{}x{}",
            syn.channels,
            syn.resolution,
            syn.resolution,
            real.channels,
            real.resolution,
            real.resolution
        ));
    }
    let n_real = match spec.real_identities {
        RealSelection::Count(n) => n,
        RealSelection::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(arg_err!("real fraction {f} outside [0, 1]"));
            }
            (f * real.n_identities as f64).round() as usize
        }
    };
    if n_real > real.n_identities {
        return Err(arg_err!("asked for {n_real} real identities, only {} available", real.n_identities));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, real.n_identities, n_real).into_vec();
    chosen.sort_unstable();

    let absolute = |lm: &LoadedManifest, rel: &str| absolute_string(&lm.resolve(rel));
    let mut seen = BTreeSet::new();
    let mut identities = Vec::with_capacity(n_real + syn.n_identities);
    let sources = chosen
        .iter()
        .map(|&i| (spec.real, &real.identities[i]))
        .chain(syn.identities.iter().map(|e| (spec.synthetic, e)));
    for (label, (lm, e)) in sources.enumerate() {
        let images = e.images.iter().map(|r| absolute(lm, r)).collect::<Result<Vec<_>>>()?;
        for p in &images {
            if !seen.insert(p.clone()) {
                return Err(arg_err!("image {p} appears in both datasets"));
            }
        }
        identities.push(IdentityEntry {
            label,
            images,
            ..e.clone()
        });
    }
    let counts: BTreeSet<usize> = identities.iter().map(|e| e.images.len()).collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        n_identities: identities.len(),
        realisations: if counts.len() == 1 { counts.into_iter().next() } else { None },
        resolution: syn.resolution,
        channels: syn.channels,
        seed,
        source: DatasetSource::Mixed,
        identities,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::oracle::OracleWorldSpec;

    fn tiny_gan() -> GanModel {
        let cfg = GanConfig {
            n_z: 8,
            n_w: 16,
            resolution: 16,
            channels: 3,
            mapping_layers: 1,
            synthesis_widths: vec![8, 8, 8],
            discriminator_widths: vec![8, 8],
        };
        GanModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn export_counts_and_determinism() {
        let model = tiny_gan();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&model, "abc", 3, 2, 7, a.path()).unwrap();
        let mb = generate_dataset(&model, "abc", 3, 2, 7, b.path()).unwrap();
        assert_eq!(ma.n_images(), 6);
        assert_eq!(ma.n_identities, 3);
        assert_eq!(ma, mb);
        let digests: BTreeSet<_> = ma.identities.iter().map(|e| &e.z1_digest).collect();
        assert_eq!(digests.len(), 3);
        assert!(ma.identities.iter().all(|e| e.nearest_z1_distance.unwrap() > 0.0));
        assert!(a.path().join("id_2/img_1.png").is_file());
        for j in 0..2 {
            let x = std::fs::read(a.path().join(format!("id_1/img_{j}.png"))).unwrap();
            let y = std::fs::read(b.path().join(format!("id_1/img_{j}.png"))).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let model = tiny_gan();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&model, "abc", 2, 2, 3, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let original = std::fs::read(&path).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        let again = dir.path().join("copy.json");
        loaded.manifest.write(&again).unwrap();
        assert_eq!(original, std::fs::read(&again).unwrap());
    }

    #[test]
    fn missing_image_fails_load() {
        let model = tiny_gan();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&model, "abc", 2, 1, 3, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("id_1/img_0.png")).unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn unwritable_output_reports_partial_progress() {
        let model = tiny_gan();
        let dir = tempfile::tempdir().unwrap();
        // A regular file where identity 1's directory should go.
        std::fs::write(dir.path().join("id_1"), b"x").unwrap();
        match generate_dataset(&model, "abc", 3, 1, 3, dir.path()) {
            Err(Error::PartialOutput { last_completed, .. }) => assert_eq!(last_completed, Some(0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn zero_sizes_are_rejected() {
        let model = tiny_gan();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_dataset(&model, "", 0, 2, 0, dir.path()), Err(Error::Argument(_))));
    }

    fn oracle_set(dir: &Path, ids: std::ops::Range<usize>, m: usize) -> LoadedManifest {
        let world = OracleWorld::new(OracleWorldSpec::default()).unwrap();
        let ids: Vec<_> = ids.map(|i| IdentityFactors::from_index(i).unwrap()).collect();
        render_oracle_dataset(&world, &ids, m, 5, dir).unwrap();
        DatasetManifest::load(dir).unwrap()
    }

    #[test]
    fn mixing_offsets_synthetic_labels() {
        let r = tempfile::tempdir().unwrap();
        let s = tempfile::tempdir().unwrap();
        let real = oracle_set(r.path(), 0..10, 2);
        let syn = oracle_set(s.path(), 100..105, 2);
        let spec = MixSpec {
            synthetic: &syn,
            real: &real,
            real_identities: RealSelection::Count(10),
        };
        let mixed = mix_datasets(&spec, 1).unwrap();
        assert_eq!(mixed.n_identities, 15);
        assert_eq!(mixed.n_images(), 30);
        assert_eq!(mixed.identities[10].oracle_identity, Some(100));
        assert!(mixed.identities.iter().flat_map(|e| &e.images).all(|p| Path::new(p).is_absolute()));

        let none = MixSpec {
            real_identities: RealSelection::Fraction(0.0),
            ..spec
        };
        let only_syn = mix_datasets(&none, 1).unwrap();
        assert_eq!(only_syn.n_identities, 5);
        assert_eq!(only_syn.identities[0].label, 0);

        let partial = MixSpec {
            real_identities: RealSelection::Count(4),
            ..spec
        };
        assert_eq!(mix_datasets(&partial, 9).unwrap(), mix_datasets(&partial, 9).unwrap());
    }

    #[test]
    fn mixing_a_dataset_with_itself_is_rejected() {
        let r = tempfile::tempdir().unwrap();
        let real = oracle_set(r.path(), 0..3, 1);
        let spec = MixSpec {
            synthetic: &real,
            real: &real,
            real_identities: RealSelection::Count(1),
        };
        assert!(matches!(mix_datasets(&spec, 0), Err(Error::Argument(_))));
    }
}
