//! Dual-latent generator and discriminator.
//!
//! The identity code `z1` and the non-identity code `z2` go through two
//! mapping networks that share no parameters. Their outputs are concatenated
//! in the fixed order `[mapper_id(z1) ‖ mapper_nonid(z2)]` and projected to
//! the style vector `w`, which modulates every synthesis block.

use std::path::Path;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, ArchiveHeader};
use crate::error::{config_err, Error, Result};
use crate::image::ImageBatch;
use crate::nn::{lrelu, Builder, Conv, Dense, Init, ParamStore, LRELU_GAIN};
use crate::ops;

/// Tag recorded in checkpoints for the concatenation order of the mappers.
pub const CONCAT_ORDER: &str = "identity|non-identity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Dimension of each latent code.
    pub n_z: usize,
    /// Dimension of the fused style vector.
    pub n_w: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Fully connected layers per mapping network.
    pub mapping_layers: usize,
    /// Feature widths from the 4x4 input up to full resolution.
    pub synthesis_widths: Vec<usize>,
    /// Feature widths of the discriminator from full resolution down.
    pub discriminator_widths: Vec<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            n_z: 64,
            n_w: 128,
            resolution: 32,
            channels: 3,
            mapping_layers: 2,
            synthesis_widths: vec![64, 64, 32, 16],
            discriminator_widths: vec![16, 32, 64],
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.n_w == 0 {
            return Err(config_err!("n_z and n_w must be positive"));
        }
        if self.channels == 0 {
            return Err(config_err!("channels must be positive"));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(config_err!(
                "resolution must be a power of two >= 8, got {}",
                self.resolution
            ));
        }
        let levels = (self.resolution / 4).trailing_zeros() as usize;
        if self.synthesis_widths.len() != levels + 1 {
            return Err(config_err!(
                "resolution {} needs {} synthesis widths, got {}",
                self.resolution,
                levels + 1,
                self.synthesis_widths.len()
            ));
        }
        if self.discriminator_widths.len() != levels {
            return Err(config_err!(
                "resolution {} needs {} discriminator widths, got {}",
                self.resolution,
                levels,
                self.discriminator_widths.len()
            ));
        }
        if self.synthesis_widths.iter().chain(&self.discriminator_widths).any(|&w| w == 0) {
            return Err(config_err!("layer widths must be positive"));
        }
        Ok(())
    }
}

/// One `(z1, z2)` pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z1: Vec<f32>,
    pub z2: Vec<f32>,
}

/// Anchor, same-identity and same-pose codes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriplet {
    pub anchor: LatentPair,
    pub same_identity: LatentPair,
    pub same_pose: LatentPair,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws one triplet. Exactly `4 * n_z` standard-normal values are taken
/// from `rng`, in the order `z1_0, z2_0, z2_+, z1_-`.
pub fn sample_triplet<R: Rng>(rng: &mut R, n_z: usize) -> LatentTriplet {
    let z1_0 = normal_vec(rng, n_z);
    let z2_0 = normal_vec(rng, n_z);
    let z2_plus = normal_vec(rng, n_z);
    let z1_minus = normal_vec(rng, n_z);
    LatentTriplet {
        anchor: LatentPair {
            z1: z1_0.clone(),
            z2: z2_0.clone(),
        },
        same_identity: LatentPair {
            z1: z1_0,
            z2: z2_plus,
        },
        same_pose: LatentPair {
            z1: z1_minus,
            z2: z2_0,
        },
    }
}

/// Stacks code vectors into a `[B, n]` tensor.
pub fn stack_codes<'a>(codes: impl IntoIterator<Item = &'a Vec<f32>>) -> Result<Tensor> {
    let codes: Vec<&Vec<f32>> = codes.into_iter().collect();
    let n = codes.first().map(|c| c.len()).unwrap_or(0);
    if codes.iter().any(|c| c.len() != n) {
        return Err(config_err!("latent codes have differing lengths"));
    }
    let flat: Vec<f32> = codes.iter().flat_map(|c| c.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (codes.len(), n), &Device::Cpu)?)
}

/// A batch of triplets as the four distinct code tensors.
pub struct TripletBatch {
    pub z1_anchor: Tensor,
    pub z2_anchor: Tensor,
    pub z2_plus: Tensor,
    pub z1_minus: Tensor,
}

impl TripletBatch {
    pub fn from_triplets(triplets: &[LatentTriplet]) -> Result<Self> {
        Ok(Self {
            z1_anchor: stack_codes(triplets.iter().map(|t| &t.anchor.z1))?,
            z2_anchor: stack_codes(triplets.iter().map(|t| &t.anchor.z2))?,
            z2_plus: stack_codes(triplets.iter().map(|t| &t.same_identity.z2))?,
            z1_minus: stack_codes(triplets.iter().map(|t| &t.same_pose.z1))?,
        })
    }

    pub fn len(&self) -> usize {
        self.z1_anchor.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The five independently stored parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    MapperId,
    MapperNonId,
    Projector,
    Synthesis,
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::MapperId,
        Part::MapperNonId,
        Part::Projector,
        Part::Synthesis,
        Part::Discriminator,
    ];

    pub fn section(&self) -> &'static str {
        match self {
            Part::MapperId => "mapper_id",
            Part::MapperNonId => "mapper_nonid",
            Part::Projector => "projector",
            Part::Synthesis => "synthesis",
            Part::Discriminator => "discriminator",
        }
    }

    pub fn is_generator(&self) -> bool {
        !matches!(self, Part::Discriminator)
    }
}

#[derive(Clone)]
struct Mapper {
    layers: Vec<Dense>,
}

impl Mapper {
    fn new(b: &mut Builder, n_z: usize, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| Dense::new(&mut b.pp(&format!("fc{i}")), n_z, n_z, LRELU_GAIN, 0.0))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for l in &self.layers {
            x = lrelu(&l.forward(&x)?)?;
        }
        Ok(x)
    }
}

#[derive(Clone)]
struct SynthesisBlock {
    conv: Conv,
    style_scale: Dense,
    style_shift: Dense,
    noise_strength: Tensor,
}

#[derive(Clone)]
struct Synthesis {
    input: Dense,
    base_width: usize,
    blocks: Vec<SynthesisBlock>,
    to_rgb: Conv,
}

impl Synthesis {
    fn new(b: &mut Builder, cfg: &GanConfig) -> Result<Self> {
        let w0 = cfg.synthesis_widths[0];
        let input = Dense::new(&mut b.pp("input"), cfg.n_w, 16 * w0, LRELU_GAIN, 0.0)?;
        let mut blocks = Vec::new();
        for (i, pair) in cfg.synthesis_widths.windows(2).enumerate() {
            let mut bb = b.pp(&format!("block{i}"));
            blocks.push(SynthesisBlock {
                conv: Conv::new(&mut bb.pp("conv"), pair[0], pair[1], 3, LRELU_GAIN)?,
                style_scale: Dense::new(&mut bb.pp("style_scale"), cfg.n_w, pair[1], 1.0, 0.0)?,
                style_shift: Dense::new(&mut bb.pp("style_shift"), cfg.n_w, pair[1], 1.0, 0.0)?,
                noise_strength: bb.param("noise_strength", &[1], Init::Const(0.0))?,
            });
        }
        let last = *cfg.synthesis_widths.last().unwrap();
        let to_rgb = Conv::new(&mut b.pp("to_rgb"), last, cfg.channels, 1, 1.0)?;
        Ok(Self {
            input,
            base_width: w0,
            blocks,
            to_rgb,
        })
    }
}

#[derive(Clone)]
struct Discriminator {
    convs: Vec<Conv>,
    out: Dense,
}

impl Discriminator {
    fn new(b: &mut Builder, cfg: &GanConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = cfg.channels;
        for (i, &w) in cfg.discriminator_widths.iter().enumerate() {
            convs.push(Conv::new(&mut b.pp(&format!("conv{i}")), c_in, w, 3, LRELU_GAIN)?);
            c_in = w;
        }
        let out = Dense::new(&mut b.pp("out"), 16 * c_in, 1, 1.0, 0.0)?;
        Ok(Self { convs, out })
    }
}

/// Per-sample keys for the synthesis noise. Noise for sample `i` at block
/// `l` is a pure function of `(keys[i], l)`.
pub type NoiseKeys<'a> = &'a [u64];

fn noise_map(keys: NoiseKeys, layer: usize, res: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(keys.len() * res * res);
    for &k in keys {
        let seed = splitmix64(k ^ (layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        data.extend((0..res * res).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    Ok(Tensor::from_vec(data, (keys.len(), res, res, 1), &Device::Cpu)?)
}

/// Independent sub-seed `index` of `seed`, used for per-step and
/// per-identity random streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5eed)))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    if ops::is_finite(&t.detach())? {
        Ok(())
    } else {
        Err(Error::NumericFault {
            layer,
            detail: "non-finite activation".into(),
        })
    }
}

/// Archive configuration block for models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanArchiveConfig {
    pub gan: GanConfig,
    pub concat_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

/// Generator (two mappers, projector, synthesis) plus discriminator.
#[derive(Clone)]
pub struct GanModel {
    config: GanConfig,
    stores: [ParamStore; 5],
    mapper_id: Mapper,
    mapper_nonid: Mapper,
    projector: Dense,
    synthesis: Synthesis,
    discriminator: Discriminator,
}

impl GanModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stores: [ParamStore; 5] = Default::default();
        Self::build(config, stores, seed, false)
    }

    fn build(config: GanConfig, mut stores: [ParamStore; 5], seed: u64, strict: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [s_id, s_nonid, s_proj, s_syn, s_disc] = &mut stores;
        macro_rules! builder {
            ($s:expr) => {{
                let b = Builder::new($s, &mut rng);
                if strict {
                    b.strict()
                } else {
                    b
                }
            }};
        }
        let mapper_id = Mapper::new(&mut builder!(s_id), config.n_z, config.mapping_layers)?;
        let mapper_nonid = Mapper::new(&mut builder!(s_nonid), config.n_z, config.mapping_layers)?;
        let projector = Dense::new(&mut builder!(s_proj), 2 * config.n_z, config.n_w, 1.0, 0.0)?;
        let synthesis = Synthesis::new(&mut builder!(s_syn), &config)?;
        let discriminator = Discriminator::new(&mut builder!(s_disc), &config)?;
        Ok(Self {
            config,
            stores,
            mapper_id,
            mapper_nonid,
            projector,
            synthesis,
            discriminator,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn store(&self, part: Part) -> &ParamStore {
        &self.stores[Part::ALL.iter().position(|p| *p == part).unwrap()]
    }

    /// `(section.name, var)` for every parameter of the given parts.
    pub fn params(&self, parts: &[Part]) -> Vec<(String, &Var)> {
        parts
            .iter()
            .flat_map(|p| {
                self.store(*p)
                    .iter()
                    .map(move |(n, v)| (format!("{}.{n}", p.section()), v))
            })
            .collect()
    }

    pub fn generator_params(&self) -> Vec<(String, &Var)> {
        self.params(&[Part::MapperId, Part::MapperNonId, Part::Projector, Part::Synthesis])
    }

    pub fn discriminator_params(&self) -> Vec<(String, &Var)> {
        self.params(&[Part::Discriminator])
    }

    /// Applied (post-scaling) projector weight multiplier.
    pub fn projector_weight_scale(&self) -> f64 {
        self.projector.weight_scale()
    }

    fn check_codes(&self, z: &Tensor, what: &str) -> Result<()> {
        match z.dims() {
            [_, n] if *n == self.config.n_z => Ok(()),
            d => Err(config_err!("{what}: expected [batch, {}], got {d:?}", self.config.n_z)),
        }
    }

    pub fn map_identity(&self, z1: &Tensor) -> Result<Tensor> {
        self.check_codes(z1, "z1")?;
        self.mapper_id.forward(z1)
    }

    pub fn map_nonidentity(&self, z2: &Tensor) -> Result<Tensor> {
        self.check_codes(z2, "z2")?;
        self.mapper_nonid.forward(z2)
    }

    /// Style vectors `[B, n_w]` from code batches `[B, n_z]`.
    pub fn fuse_styles(&self, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
        if z1.dims() != z2.dims() {
            return Err(config_err!("z1 {:?} and z2 {:?} differ in shape", z1.dims(), z2.dims()));
        }
        let a = self.map_identity(z1)?;
        let b = self.map_nonidentity(z2)?;
        self.projector.forward(&Tensor::cat(&[&a, &b], 1)?)
    }

    /// Renders style vectors. Without noise keys the synthesis is noise-free.
    pub fn synthesize(&self, w: &Tensor, noise: Option<NoiseKeys>) -> Result<ImageBatch> {
        let b = w.dims()[0];
        if let Some(keys) = noise {
            if keys.len() != b {
                return Err(config_err!("{} noise keys for a batch of {b}", keys.len()));
            }
        }
        let syn = &self.synthesis;
        let mut x = lrelu(&syn.input.forward(w)?)?.reshape((b, 4, 4, syn.base_width))?;
        check_finite(&x, 0)?;
        for (i, block) in syn.blocks.iter().enumerate() {
            x = block.conv.forward(&ops::upsample2x_nhwc(&x)?)?;
            if let Some(keys) = noise {
                let res = x.dims()[1];
                let n = noise_map(keys, i, res)?.to_dtype(x.dtype())?;
                x = x.broadcast_add(&n.broadcast_mul(&block.noise_strength)?)?;
            }
            let c = x.dims()[3];
            let scale = block.style_scale.forward(w)?.affine(1.0, 1.0)?.reshape((b, 1, 1, c))?;
            let shift = block.style_shift.forward(w)?.reshape((b, 1, 1, c))?;
            x = lrelu(&x.broadcast_mul(&scale)?.broadcast_add(&shift)?)?;
            check_finite(&x, i + 1)?;
        }
        let rgb = syn.to_rgb.forward(&x)?.tanh()?;
        check_finite(&rgb, syn.blocks.len() + 1)?;
        ImageBatch::from_nhwc(&rgb)
    }

    /// Generates `[B, C, H, W]` images in `[-1, 1]` from code batches.
    pub fn generate(&self, z1: &Tensor, z2: &Tensor, noise: Option<NoiseKeys>) -> Result<ImageBatch> {
        let w = self.fuse_styles(z1, z2)?;
        self.synthesize(&w, noise)
    }

    /// Real/fake logits `[B]`.
    pub fn discriminate(&self, images: &ImageBatch) -> Result<Tensor> {
        images.expect_shape(self.config.channels, self.config.resolution)?;
        let mut x = images.to_nhwc()?;
        for conv in &self.discriminator.convs {
            x = ops::avgpool2x_nhwc(&lrelu(&conv.forward(&x)?)?)?;
        }
        let b = x.dims()[0];
        let flat = x.reshape((b, ()))?;
        Ok(self.discriminator.out.forward(&flat)?.squeeze(1)?)
    }

    pub fn archive_config(&self) -> GanArchiveConfig {
        GanArchiveConfig {
            gan: self.config.clone(),
            concat_order: CONCAT_ORDER.into(),
            train: None,
        }
    }

    /// Adds the five weight sections to an archive.
    pub fn add_to_archive(&self, archive: &mut Archive) {
        for p in Part::ALL {
            archive.add_store(p.section(), self.store(p));
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let header = ArchiveHeader::new("gan", None, &self.archive_config())?;
        let mut a = Archive::new(header);
        self.add_to_archive(&mut a);
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Loads the model from a `gan` or `train-state` archive.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let cfg: GanArchiveConfig = archive.header.config_as()?;
        if cfg.concat_order != CONCAT_ORDER {
            return Err(config_err!(
                "checkpoint concatenation order {:?} is not {CONCAT_ORDER:?}",
                cfg.concat_order
            ));
        }
        cfg.gan.validate()?;
        let mut stores: [ParamStore; 5] = Default::default();
        for (i, p) in Part::ALL.iter().enumerate() {
            stores[i] = archive.store(p.section())?;
        }
        Self::build(cfg.gan, stores, 0, true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Independent copy of all weights.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut stores: [ParamStore; 5] = Default::default();
        for (i, p) in Part::ALL.iter().enumerate() {
            stores[i] = self.store(*p).deep_clone()?;
        }
        Self::build(self.config.clone(), stores, 0, true)
    }
}
