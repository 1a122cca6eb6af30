//! Alternating GAN training over latent triplets.
//!
//! Each step consumes one batch of triplets. The discriminator sees real
//! images and the anchors only; the generator is updated on the anchor GAN
//! loss plus the weighted auxiliary losses over the whole triplet.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, ArchiveHeader};
use crate::error::{arg_err, config_err, Error, Result};
use crate::gan::{derive_seed, sample_triplet, GanArchiveConfig, GanConfig, GanModel, TripletBatch};
use crate::image::ImageBatch;
use crate::losses::{self, AuxLossReport, AuxLosses, LossConfig};
use crate::nn::Adam;
use crate::oracle::OracleWorld;
use crate::providers::{Embedder, PoseEstimator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Steps between intermediate checkpoints; zero writes only the final one.
    pub checkpoint_interval: u64,
    /// Real batches rendered ahead of the training thread; zero renders inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            seed: 0,
            checkpoint_interval: 500,
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(config_err!("optimizer betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Deterministic source of real images, indexed by step.
pub trait RealSource: Send + Sync {
    fn batch(&self, step: u64, batch_size: usize) -> Result<ImageBatch>;
}

/// Oracle-world renders with random identity and pose.
pub struct OracleSource {
    world: Arc<OracleWorld>,
    seed: u64,
}

impl OracleSource {
    pub fn new(world: Arc<OracleWorld>, seed: u64) -> Self {
        Self { world, seed }
    }
}

impl RealSource for OracleSource {
    fn batch(&self, step: u64, batch_size: usize) -> Result<ImageBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ 0x7265_616c, step));
        let items: Vec<_> = (0..batch_size)
            .map(|_| {
                let id = OracleWorld::sample_identity(&mut rng);
                (id, self.world.sample_pose(&mut rng))
            })
            .collect();
        self.world.render_batch(&items)
    }
}

/// A source that always returns the same images (used by tests).
pub struct FixedSource(pub ImageBatch);

impl RealSource for FixedSource {
    fn batch(&self, _step: u64, batch_size: usize) -> Result<ImageBatch> {
        if self.0.len() < batch_size {
            return Err(config_err!("fixed source holds {} images, need {batch_size}", self.0.len()));
        }
        self.0.narrow(0, batch_size)
    }
}

/// Renders real batches for a step range on a background thread, handing
/// them over through a bounded channel.
struct Prefetcher {
    rx: Option<Receiver<(u64, Result<ImageBatch>)>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    fn spawn(source: Arc<dyn RealSource>, steps: std::ops::Range<u64>, batch_size: usize, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth);
        let handle = std::thread::spawn(move || {
            for step in steps {
                let b = source.batch(step, batch_size);
                if tx.send((step, b)).is_err() {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }

    fn next(&self, step: u64) -> Result<ImageBatch> {
        let (got, batch) = self
            .rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .ok_or_else(|| Error::Numeric("real-image prefetch thread stopped".into()))?;
        debug_assert_eq!(got, step);
        batch
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the channel makes a blocked producer return.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone)]
pub struct TrainState {
    pub model: GanModel,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed steps.
    pub step: u64,
}

/// Header block of a training-state archive.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    opt_g_steps: u64,
    opt_d_steps: u64,
    train: TrainConfig,
    losses: LossConfig,
}

impl TrainState {
    pub fn new(gan: GanConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: GanModel::new(gan, derive_seed(cfg.seed, u64::MAX))?,
            opt_g: Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2),
            step: 0,
        })
    }

    pub fn to_archive(&self, train: &TrainConfig, loss: &LossConfig) -> Result<Archive> {
        let meta = TrainMeta {
            step: self.step,
            opt_g_steps: self.opt_g.steps_taken(),
            opt_d_steps: self.opt_d.steps_taken(),
            train: train.clone(),
            losses: loss.clone(),
        };
        let cfg = GanArchiveConfig {
            train: Some(serde_json::to_value(&meta)?),
            ..self.model.archive_config()
        };
        let mut a = Archive::new(ArchiveHeader::new("train-state", None, &cfg)?);
        self.model.add_to_archive(&mut a);
        a.add_tensors("opt_g", self.opt_g.state_tensors().1);
        a.add_tensors("opt_d", self.opt_d.state_tensors().1);
        Ok(a)
    }

    pub fn save(&self, path: &Path, train: &TrainConfig, loss: &LossConfig) -> Result<()> {
        self.to_archive(train, loss)?.save(path)
    }

    /// Restores a state written by [`TrainState::save`]. Optimizer
    /// hyper-parameters come from `cfg`.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let archive = Archive::load(path)?;
        if archive.header.kind != "train-state" {
            return Err(Error::format(path, format!("expected a train-state archive, found {:?}", archive.header.kind)));
        }
        let model = GanModel::from_archive(&archive)?;
        let gcfg: GanArchiveConfig = archive.header.config_as()?;
        let meta: TrainMeta = serde_json::from_value(
            gcfg.train
                .ok_or_else(|| Error::format(path, "train-state archive lacks training metadata"))?,
        )?;
        let mut opt_g = Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2);
        let mut opt_d = Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2);
        opt_g.restore(meta.opt_g_steps, &archive.section("opt_g"))?;
        opt_d.restore(meta.opt_d_steps, &archive.section("opt_d"))?;
        Ok(Self {
            model,
            opt_g,
            opt_d,
            step: meta.step,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
    #[serde(flatten)]
    pub aux: AuxLossReport,
    pub g_total: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
}

/// Frozen auxiliary networks used by the generator update.
#[derive(Clone)]
pub struct AuxModels {
    pub embedder: Arc<dyn Embedder>,
    pub pose: Arc<dyn PoseEstimator>,
}

fn grad_norm(params: &[(String, &Var)], grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, v) in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Auxiliary losses over a generated `[3B]` batch laid out as
/// `[anchors; same-identity; same-pose]`.
pub fn triplet_aux_losses(images: &ImageBatch, aux: &AuxModels, cfg: &LossConfig) -> Result<AuxLosses> {
    let b = images.len() / 3;
    let e = aux.embedder.embed_tensor(images)?;
    let p = aux.pose.pose_tensor(images)?;
    let part = |t: &Tensor, k: usize| t.narrow(0, k * b, b);
    Ok(AuxLosses {
        identity: losses::identity_losses(&part(&e, 0)?, &part(&e, 1)?, &part(&e, 2)?, cfg)?,
        pose: losses::pose_losses(&part(&p, 0)?, &part(&p, 1)?, &part(&p, 2)?, cfg)?,
    })
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    real: &ImageBatch,
    aux: &AuxModels,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let b = train.batch_size;
    let gcfg = state.model.config().clone();
    real.expect_shape(gcfg.channels, gcfg.resolution)?;
    if real.len() != b {
        return Err(config_err!("real batch has {} images, batch_size is {b}", real.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, step));
    let triplets: Vec<_> = (0..b).map(|_| sample_triplet(&mut rng, gcfg.n_z)).collect();
    let batch = TripletBatch::from_triplets(&triplets)?;
    let keys: Vec<u64> = (0..b).map(|_| rng.next_u64()).collect();

    // Discriminator: real images against detached anchors.
    let model = &state.model;
    let anchors = model.generate(&batch.z1_anchor, &batch.z2_anchor, Some(&keys))?.detach();
    let real_scores = model.discriminate(real)?;
    let fake_scores = model.discriminate(&anchors)?;
    let (d_loss, _) = losses::gan_losses(&real_scores, &fake_scores, loss.generator_objective)?;
    let (d_total, r1) = if loss.r1_weight > 0.0 {
        // First-order R1 estimate: E[(D(x + d) - D(x))^2] / sigma^2 ~ |grad D(x)|^2.
        let n = real.pixels().elem_count();
        let delta: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * loss.r1_sigma as f32)
            .collect();
        let delta = Tensor::from_vec(delta, real.pixels().shape(), &Device::Cpu)?;
        let perturbed = ImageBatch::new((real.pixels() + delta)?)?;
        let diff = (model.discriminate(&perturbed)? - &real_scores)?;
        let r1 = diff.sqr()?.mean_all()?.affine(1.0 / (loss.r1_sigma * loss.r1_sigma), 0.0)?;
        ((&d_loss + r1.affine(loss.r1_weight / 2.0, 0.0)?)?, scalar(&r1)?)
    } else {
        (d_loss.clone(), 0.0)
    };
    let d_params = model.discriminator_params();
    let d_grads = d_total.backward()?;
    let d_grad_norm = grad_norm(&d_params, &d_grads)?;
    let d_loss_v = scalar(&d_loss)?;

    // Generator: anchor GAN loss plus the triplet losses.
    let z1 = Tensor::cat(&[&batch.z1_anchor, &batch.z1_anchor, &batch.z1_minus], 0)?;
    let z2 = Tensor::cat(&[&batch.z2_anchor, &batch.z2_plus, &batch.z2_anchor], 0)?;
    let keys3: Vec<u64> = keys.iter().cycle().take(3 * b).copied().collect();
    let images = model.generate(&z1, &z2, Some(&keys3))?;
    let anchor_imgs = images.narrow(0, b)?;
    let g_scores = model.discriminate(&anchor_imgs)?;
    let (_, g_loss) = losses::gan_losses(&real_scores.detach(), &g_scores, loss.generator_objective)?;
    let aux_losses = if loss.lambda_aux > 0.0 {
        triplet_aux_losses(&images, aux, loss)?
    } else {
        triplet_aux_losses(&images.detach(), aux, loss)?
    };
    let g_total = losses::total_generator_loss(&g_loss, &aux_losses, loss)?;
    let g_params = model.generator_params();
    let g_grads = g_total.backward()?;
    let g_grad_norm = grad_norm(&g_params, &g_grads)?;
    let report = aux_losses.report(loss)?;
    let metrics = StepMetrics {
        step,
        d_loss: d_loss_v,
        g_loss: scalar(&g_loss)?,
        r1,
        aux: report,
        g_total: scalar(&g_total)?,
        d_grad_norm,
        g_grad_norm,
    };
    let finite = [metrics.d_loss, metrics.g_loss, metrics.g_total, metrics.r1, d_grad_norm, g_grad_norm]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFiniteLoss {
            step,
            snapshot: serde_json::to_string(&metrics)?,
        });
    }
    state.opt_d.step(d_params.into_iter(), &d_grads)?;
    state.opt_g.step(g_params.into_iter(), &g_grads)?;
    state.step = step;
    Ok(metrics)
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("gan.safetensors")
    }
    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:06}.safetensors"))
    }
}

/// Keeps the rows of an existing metrics log up to `step`, so a resumed
/// run appends exactly where the checkpoint left off.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    crate::io_util::write_atomic(path, kept.as_bytes())
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = crate::io_util::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Runs (or resumes) training up to `train.steps`, writing the metrics log,
/// interval checkpoints and the final checkpoint under `out`.
pub fn train(
    gan: GanConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    aux: &AuxModels,
    source: Arc<dyn RealSource>,
    out: &TrainOutput,
    resume: Option<&Path>,
) -> Result<TrainState> {
    train.validate()?;
    loss.validate()?;
    gan.validate()?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p, train)?;
            if s.model.config() != &gan {
                return Err(config_err!("checkpoint {} was trained with a different GAN configuration", p.display()));
            }
            s
        }
        None => TrainState::new(gan, train)?,
    };
    if state.step > train.steps {
        return Err(config_err!("checkpoint is at step {}, beyond the requested {}", state.step, train.steps));
    }
    crate::io_util::create_dir_all(&out.dir)?;
    let metrics_path = out.metrics();
    if state.step == 0 {
        crate::io_util::write_atomic(&metrics_path, b"")?;
    } else {
        truncate_metrics(&metrics_path, state.step)?;
    }
    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let range = state.step + 1..train.steps + 1;
    let prefetch = (train.prefetch > 0).then(|| Prefetcher::spawn(source.clone(), range.clone(), train.batch_size, train.prefetch));
    for step in range {
        let real = match &prefetch {
            Some(p) => p.next(step)?,
            None => source.batch(step, train.batch_size)?,
        };
        let m = train_step(&mut state, &real, aux, train, loss)?;
        let mut line = serde_json::to_string(&m)?;
        line.push('\n');
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
        if step % 100 == 0 {
            log::info!(
                "step {step}: d={:.4} g={:.4} theta_same={:.3} theta_diff={:.3}",
                m.d_loss,
                m.g_loss,
                m.aux.theta_same,
                m.aux.theta_diff
            );
        }
        if train.checkpoint_interval > 0 && step % train.checkpoint_interval == 0 && step != train.steps {
            state.save(&out.step_checkpoint(step), train, loss)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    state.save(&out.final_checkpoint(), train, loss)?;
    Ok(state)
}

/// Measurements over fresh triplets from a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub n_triplets: usize,
    /// Mean embedding angle, anchor vs same-identity sample, radians.
    pub mean_theta_same: f64,
    /// Mean embedding angle, anchor vs same-pose sample, radians.
    pub mean_theta_diff: f64,
    /// Mean Euclidean pose distance, anchor vs same-pose sample.
    pub mean_pose_dist_same_pose: f64,
    /// Mean Euclidean pose distance, anchor vs same-identity sample.
    pub mean_pose_dist_same_identity: f64,
}

fn angle(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    dot.clamp(-losses::ACOS_CLIP, losses::ACOS_CLIP).acos()
}

fn pose_dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Generates `n` fresh triplets and measures them with the given providers.
pub fn measure_disentanglement(model: &GanModel, aux: &AuxModels, n: usize, seed: u64) -> Result<DisentanglementReport> {
    if n == 0 {
        return Err(arg_err!("need at least one triplet"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_z = model.config().n_z;
    let mut sums = [0.0f64; 4];
    let chunk = 50;
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let triplets: Vec<_> = (0..b).map(|_| sample_triplet(&mut rng, n_z)).collect();
        let batch = TripletBatch::from_triplets(&triplets)?;
        let keys: Vec<u64> = (0..b).map(|_| rng.next_u64()).collect();
        let keys3: Vec<u64> = keys.iter().cycle().take(3 * b).copied().collect();
        let z1 = Tensor::cat(&[&batch.z1_anchor, &batch.z1_anchor, &batch.z1_minus], 0)?;
        let z2 = Tensor::cat(&[&batch.z2_anchor, &batch.z2_plus, &batch.z2_anchor], 0)?;
        let images = model.generate(&z1, &z2, Some(&keys3))?.detach();
        let e = aux.embedder.embed(&images)?;
        let p = aux.pose.estimate_pose(&images)?;
        for i in 0..b {
            sums[0] += angle(&e[i], &e[b + i]);
            sums[1] += angle(&e[i], &e[2 * b + i]);
            sums[2] += pose_dist(&p[i], &p[2 * b + i]);
            sums[3] += pose_dist(&p[i], &p[b + i]);
        }
        done += b;
    }
    let n_f = n as f64;
    Ok(DisentanglementReport {
        n_triplets: n,
        mean_theta_same: sums[0] / n_f,
        mean_theta_diff: sums[1] / n_f,
        mean_pose_dist_same_pose: sums[2] / n_f,
        mean_pose_dist_same_identity: sums[3] / n_f,
    })
}

