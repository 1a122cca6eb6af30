//! Identity-embedding and pose-estimation providers.
//!
//! Two providers are registered: `oracle`, which reads the procedural
//! world's ground truth straight from pixels, and `toy-cnn`, a small
//! trainable convolutional network loaded from a checkpoint. Providers used
//! during GAN training are frozen: gradients reach their inputs, never their
//! weights.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Archive, ArchiveHeader};
use crate::error::{config_err, Result};
use crate::image::ImageBatch;
use crate::margin::MarginHeadConfig;
use crate::nn::{lrelu, Builder, Conv, Dense, ParamStore, LRELU_GAIN};
use crate::ops;
use crate::oracle::{OracleWorld, OracleWorldSpec};

pub const ORACLE: &str = "oracle";
pub const TOY_CNN: &str = "toy-cnn";
pub const PROVIDER_NAMES: [&str; 2] = [ORACLE, TOY_CNN];

/// Images per forward pass when embedding large sets.
const CHUNK: usize = 256;

/// Maps images to unit-norm identity embeddings.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn resolution(&self) -> usize;
    fn dim(&self) -> usize;
    /// Differentiable embeddings `[B, dim]`, unit L2 norm per row.
    fn embed_tensor(&self, images: &ImageBatch) -> Result<Tensor>;
    /// Digest of everything that determines the output.
    fn checksum(&self) -> Result<String>;

    /// Embeddings as plain vectors, computed in chunks.
    fn embed(&self, images: &ImageBatch) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(CHUNK) {
            let n = CHUNK.min(images.len() - start);
            let e = self.embed_tensor(&images.narrow(start, n)?.detach())?;
            out.extend(e.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }
}

/// Maps images to 3-component pose vectors.
pub trait PoseEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn resolution(&self) -> usize;
    /// Differentiable pose estimates `[B, 3]`.
    fn pose_tensor(&self, images: &ImageBatch) -> Result<Tensor>;
    fn checksum(&self) -> Result<String>;

    fn estimate_pose(&self, images: &ImageBatch) -> Result<Vec<[f32; 3]>> {
        let mut out = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(CHUNK) {
            let n = CHUNK.min(images.len() - start);
            let p = self.pose_tensor(&images.narrow(start, n)?.detach())?;
            out.extend(
                p.to_dtype(DType::F32)?
                    .to_vec2::<f32>()?
                    .into_iter()
                    .map(|r| [r[0], r[1], r[2]]),
            );
        }
        Ok(out)
    }
}

/// Maps images to raw feature vectors for distribution comparisons.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, images: &ImageBatch) -> Result<Tensor>;

    fn features_chunked(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(CHUNK) {
            let n = CHUNK.min(images.len() - start);
            let f = self.features(&images.narrow(start, n)?.detach())?;
            out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

fn spec_digest(spec: &OracleWorldSpec) -> Result<String> {
    let json = serde_json::to_vec(spec)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Ground-truth identity embedder of the oracle world.
#[derive(Clone)]
pub struct OracleEmbedder {
    world: Arc<OracleWorld>,
}

impl OracleEmbedder {
    pub fn new(world: Arc<OracleWorld>) -> Self {
        Self { world }
    }
}

impl Embedder for OracleEmbedder {
    fn name(&self) -> &str {
        ORACLE
    }
    fn resolution(&self) -> usize {
        self.world.resolution()
    }
    fn dim(&self) -> usize {
        self.world.embed_dim()
    }
    fn embed_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        self.world.embed_tensor(images)
    }
    fn checksum(&self) -> Result<String> {
        spec_digest(self.world.spec())
    }
}

impl FeatureExtractor for OracleEmbedder {
    fn name(&self) -> &str {
        ORACLE
    }
    fn features(&self, images: &ImageBatch) -> Result<Tensor> {
        self.world.embed_tensor(images)
    }
}

/// Ground-truth pose reader of the oracle world: (rotation, shift_x,
/// shift_y), rotation in radians, shifts in units of the maximum shift.
#[derive(Clone)]
pub struct OraclePose {
    world: Arc<OracleWorld>,
}

impl OraclePose {
    pub fn new(world: Arc<OracleWorld>) -> Self {
        Self { world }
    }
}

impl PoseEstimator for OraclePose {
    fn name(&self) -> &str {
        ORACLE
    }
    fn resolution(&self) -> usize {
        self.world.resolution()
    }
    fn pose_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        self.world.pose_tensor(images)
    }
    fn checksum(&self) -> Result<String> {
        spec_digest(self.world.spec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCnnConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Convolution widths; each level halves the resolution.
    pub widths: Vec<usize>,
    /// Output dimension of the final dense layer.
    pub out_dim: usize,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 3,
            widths: vec![16, 32, 64],
            out_dim: 32,
        }
    }
}

impl ToyCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.widths.len();
        if self.channels == 0 || self.out_dim == 0 || self.widths.contains(&0) {
            return Err(config_err!("toy-cnn sizes must be positive"));
        }
        if levels == 0 || self.resolution % (1 << levels) != 0 {
            return Err(config_err!(
                "resolution {} is not divisible by 2^{levels}",
                self.resolution
            ));
        }
        Ok(())
    }
}

/// Conv / leaky-ReLU / average-pool stack followed by one dense layer.
#[derive(Clone)]
pub struct ToyCnn {
    config: ToyCnnConfig,
    store: ParamStore,
    convs: Vec<Conv>,
    out: Dense,
}

impl ToyCnn {
    pub fn new(config: ToyCnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, ParamStore::new(), seed, false, false)
    }

    /// Rebuilds from stored weights. A frozen network passes no gradient to
    /// its weights.
    pub fn from_store(config: ToyCnnConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        config.validate()?;
        Self::build(config, store, 0, true, frozen)
    }

    fn build(config: ToyCnnConfig, mut store: ParamStore, seed: u64, strict: bool, frozen: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        if strict {
            b = b.strict();
        }
        if frozen {
            b = b.frozen();
        }
        let mut convs = Vec::new();
        let mut c_in = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv::new(&mut b.pp(&format!("conv{i}")), c_in, w, 3, LRELU_GAIN)?);
            c_in = w;
        }
        let side = config.resolution >> config.widths.len();
        let out = Dense::new(&mut b.pp("out"), side * side * c_in, config.out_dim, 1.0, 0.0)?;
        Ok(Self {
            config,
            store,
            convs,
            out,
        })
    }

    pub fn config(&self) -> &ToyCnnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Raw outputs `[B, out_dim]`. Each image is first standardized over
    /// all of its pixels and channels; the glyphs cover a small part of the
    /// frame and would otherwise barely move the pooled features.
    pub fn forward(&self, images: &ImageBatch) -> Result<Tensor> {
        images.expect_shape(self.config.channels, self.config.resolution)?;
        let mut x = standardize_images(&images.to_nhwc()?)?;
        for conv in &self.convs {
            x = ops::avgpool2x_nhwc(&lrelu(&conv.forward(&x)?)?)?;
        }
        let b = x.dims()[0];
        self.out.forward(&x.reshape((b, ()))?)
    }
}

const STANDARDIZE_EPS: f64 = 1e-3;

/// Per-image zero mean and unit variance over `[H, W, C]`.
fn standardize_images(x: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    let flat = x.reshape((b, ()))?;
    let mean = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let std = centered.sqr()?.mean_keepdim(1)?.affine(1.0, STANDARDIZE_EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?.reshape(x.shape())?)
}

/// Role of a toy-cnn archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyRole {
    /// Recognizer: backbone plus margin head; embeddings are normalized
    /// backbone outputs.
    Recognizer,
    /// Pose regressor with three outputs.
    Pose,
}

/// Header configuration of a toy-cnn archive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyArchiveConfig {
    pub role: ToyRole,
    pub cnn: ToyCnnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<MarginHeadConfig>,
}

pub(crate) fn toy_archive(config: &ToyArchiveConfig, backbone: &ParamStore, head: Option<&ParamStore>) -> Result<Archive> {
    let header = ArchiveHeader::new("provider", Some(TOY_CNN), config)?;
    let mut a = Archive::new(header);
    a.add_store("backbone", backbone);
    if let Some(h) = head {
        a.add_store("head", h);
    }
    Ok(a)
}

/// Reads and checks a toy-cnn archive of the given role.
pub(crate) fn read_toy_archive(path: &Path, role: ToyRole) -> Result<(Archive, ToyArchiveConfig)> {
    let archive = Archive::load(path)?;
    if archive.header.kind != "provider" || archive.header.provider.as_deref() != Some(TOY_CNN) {
        return Err(crate::Error::format(path, "not a toy-cnn provider archive"));
    }
    let cfg: ToyArchiveConfig = archive.header.config_as()?;
    if cfg.role != role {
        return Err(crate::Error::format(
            path,
            format!("archive holds a {:?} network, expected {role:?}", cfg.role),
        ));
    }
    Ok((archive, cfg))
}

/// Normalized outputs of a frozen toy network.
#[derive(Clone)]
pub struct ToyEmbedder {
    net: ToyCnn,
}

impl ToyEmbedder {
    pub fn new(net: ToyCnn) -> Self {
        Self { net }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (archive, cfg) = read_toy_archive(path, ToyRole::Recognizer)?;
        let net = ToyCnn::from_store(cfg.cnn, archive.store("backbone")?, true)?;
        Ok(Self { net })
    }

    pub fn network(&self) -> &ToyCnn {
        &self.net
    }
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        TOY_CNN
    }
    fn resolution(&self) -> usize {
        self.net.config.resolution
    }
    fn dim(&self) -> usize {
        self.net.config.out_dim
    }
    fn embed_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        Ok(ops::l2_normalize(&self.net.forward(images)?)?)
    }
    fn checksum(&self) -> Result<String> {
        self.net.store.checksum()
    }
}

impl FeatureExtractor for ToyEmbedder {
    fn name(&self) -> &str {
        TOY_CNN
    }
    /// Pre-normalization outputs.
    fn features(&self, images: &ImageBatch) -> Result<Tensor> {
        self.net.forward(images)
    }
}

/// Frozen toy pose regressor.
#[derive(Clone)]
pub struct ToyPose {
    net: ToyCnn,
}

impl ToyPose {
    pub fn new(net: ToyCnn) -> Result<Self> {
        if net.config.out_dim != 3 {
            return Err(config_err!("pose network must have 3 outputs, has {}", net.config.out_dim));
        }
        Ok(Self { net })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (archive, cfg) = read_toy_archive(path, ToyRole::Pose)?;
        Self::new(ToyCnn::from_store(cfg.cnn, archive.store("backbone")?, true)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = ToyArchiveConfig {
            role: ToyRole::Pose,
            cnn: self.net.config.clone(),
            head: None,
        };
        toy_archive(&cfg, &self.net.store, None)?.save(path)
    }
}

impl PoseEstimator for ToyPose {
    fn name(&self) -> &str {
        TOY_CNN
    }
    fn resolution(&self) -> usize {
        self.net.config.resolution
    }
    fn pose_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        self.net.forward(images)
    }
    fn checksum(&self) -> Result<String> {
        self.net.store.checksum()
    }
}

fn need_checkpoint<'a>(name: &str, checkpoint: Option<&'a Path>) -> Result<&'a Path> {
    checkpoint.ok_or_else(|| config_err!("provider {name:?} needs a checkpoint path"))
}

fn unknown(name: &str) -> crate::Error {
    config_err!("unknown provider {name:?}; known providers: {}", PROVIDER_NAMES.join(", "))
}

/// Looks up an embedder by registry name.
pub fn embedder(name: &str, world: &Arc<OracleWorld>, checkpoint: Option<&Path>) -> Result<Arc<dyn Embedder>> {
    match name {
        ORACLE => Ok(Arc::new(OracleEmbedder::new(world.clone()))),
        TOY_CNN => Ok(Arc::new(ToyEmbedder::load(need_checkpoint(name, checkpoint)?)?)),
        _ => Err(unknown(name)),
    }
}

/// Looks up a pose estimator by registry name.
pub fn pose_estimator(
    name: &str,
    world: &Arc<OracleWorld>,
    checkpoint: Option<&Path>,
) -> Result<Arc<dyn PoseEstimator>> {
    match name {
        ORACLE => Ok(Arc::new(OraclePose::new(world.clone()))),
        TOY_CNN => Ok(Arc::new(ToyPose::load(need_checkpoint(name, checkpoint)?)?)),
        _ => Err(unknown(name)),
    }
}

/// Convenience: an oracle world shared between providers.
pub fn oracle_world(spec: &OracleWorldSpec) -> Result<Arc<OracleWorld>> {
    Ok(Arc::new(OracleWorld::new(spec.clone())?))
}
