//! Margin-softmax recognizer training and pair-based face verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LoadedManifest;
use crate::error::{arg_err, config_err, Error, Result};
use crate::gan::derive_seed;
use crate::image::ImageBatch;
use crate::io_util::{read_to_string, write_atomic};
use crate::margin::{angular_logits_tensor, one_hot, MarginHeadConfig};
use crate::nn::{Adam, Builder, Init, ParamStore};
use crate::ops;
use crate::providers::{read_toy_archive, toy_archive, Embedder, ToyArchiveConfig, ToyCnn, ToyCnnConfig, ToyEmbedder, ToyRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerTrainConfig {
    pub cnn: ToyCnnConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epochs over which the angular margin ramps linearly from zero to its
    /// full value; zero applies it from the start.
    pub margin_warmup_epochs: usize,
    pub seed: u64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            cnn: ToyCnnConfig::default(),
            max_epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            patience: 10,
            margin_warmup_epochs: 5,
            seed: 0,
        }
    }
}

impl RecognizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(config_err!("max_epochs, batch_size and patience must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Toy backbone plus one unit-normalized weight vector per class.
#[derive(Clone)]
pub struct Recognizer {
    net: ToyCnn,
    head_store: ParamStore,
    head: MarginHeadConfig,
}

const CLASS_WEIGHTS: &str = "class_weights";

impl Recognizer {
    pub fn new(cnn: ToyCnnConfig, head: MarginHeadConfig, seed: u64) -> Result<Self> {
        head.validate()?;
        let net = ToyCnn::new(cnn.clone(), seed)?;
        let mut head_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let w = Builder::new(&mut head_store, &mut rng).param(CLASS_WEIGHTS, &[head.n_classes, cnn.out_dim], Init::StandardNormal)?;
        // Unit rows keep the optimizer's step size comparable to an angle.
        head_store.set(CLASS_WEIGHTS, &ops::l2_normalize(&w)?)?;
        Ok(Self { net, head_store, head })
    }

    pub fn head(&self) -> &MarginHeadConfig {
        &self.head
    }

    pub fn network(&self) -> &ToyCnn {
        &self.net
    }

    fn class_var(&self) -> &Var {
        self.head_store.get(CLASS_WEIGHTS).expect("head store always holds class weights")
    }

    /// Unit-norm class weights `[K, d]`.
    pub fn class_weights(&self) -> Result<Tensor> {
        Ok(ops::l2_normalize(self.class_var().as_tensor())?)
    }

    pub fn class_weights_vec(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.class_weights()?.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Unit-norm embeddings `[B, d]`.
    pub fn embed_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        Ok(ops::l2_normalize(&self.net.forward(images)?)?)
    }

    pub fn embed_vec(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        let emb = self.embedder();
        Ok(emb.embed(images)?.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
    }

    /// Margin logits against the given labels.
    pub fn logits(&self, images: &ImageBatch, labels: &[usize]) -> Result<Tensor> {
        angular_logits_tensor(&self.embed_tensor(images)?, &self.class_weights()?, labels, &self.head)
    }

    /// Mean cross-entropy of the margin logits.
    pub fn loss(&self, images: &ImageBatch, labels: &[usize]) -> Result<Tensor> {
        let logits = self.logits(images, labels)?;
        let mask = one_hot(labels, self.head.n_classes, logits.dtype())?;
        let nll = (ops::log_softmax(&logits)? * mask)?.sum_all()?.neg()?;
        Ok(nll.affine(1.0 / labels.len() as f64, 0.0)?)
    }

    /// Inference view of the backbone.
    pub fn embedder(&self) -> ToyEmbedder {
        ToyEmbedder::new(self.net.clone())
    }

    fn archive_config(&self) -> ToyArchiveConfig {
        ToyArchiveConfig {
            role: ToyRole::Recognizer,
            cnn: self.net.config().clone(),
            head: Some(self.head.clone()),
        }
    }

    /// Writes a `toy-cnn` provider archive usable as an embedder.
    pub fn save(&self, path: &Path) -> Result<()> {
        toy_archive(&self.archive_config(), self.net.store(), Some(&self.head_store))?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (archive, cfg) = read_toy_archive(path, ToyRole::Recognizer)?;
        let head = cfg
            .head
            .ok_or_else(|| Error::format(path, "recognizer archive has no margin head"))?;
        head.validate()?;
        let net = ToyCnn::from_store(cfg.cnn.clone(), archive.store("backbone")?, false)?;
        let head_store = archive.store("head")?;
        match head_store.get(CLASS_WEIGHTS) {
            Some(v) if v.dims() == [head.n_classes, cfg.cnn.out_dim] => {}
            _ => return Err(Error::format(path, "class weights missing or misshapen")),
        }
        Ok(Self { net, head_store, head })
    }

    fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            net: ToyCnn::from_store(self.net.config().clone(), self.net.store().deep_clone()?, false)?,
            head_store: self.head_store.deep_clone()?,
            head: self.head.clone(),
        })
    }

    /// Trainable parameters. The output bias stays at its centered
    /// initialization: the raw outputs vary by only a few hundredths across
    /// images, and a freely moving bias quickly swamps that signal.
    fn params(&self) -> impl Iterator<Item = (String, &Var)> {
        let backbone = self
            .net
            .store()
            .iter()
            .filter(|(n, _)| n.as_str() != OUTPUT_BIAS)
            .map(|(n, v)| (format!("backbone.{n}"), v));
        let head = self.head_store.iter().map(|(n, v)| (format!("head.{n}"), v));
        backbone.chain(head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerReport {
    pub epochs_run: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

fn select(images: &ImageBatch, idx: &[usize]) -> Result<ImageBatch> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let t = Tensor::from_vec(ids, idx.len(), &Device::Cpu)?;
    ImageBatch::new(images.pixels().index_select(&t, 0)?)
}

/// Images used for the data-dependent output initialization.
const CENTERING_SAMPLE: usize = 512;

/// Sets the output bias so the backbone's mean raw output over (a prefix
/// of) the training images is zero. A freshly initialized backbone maps
/// every image to nearly the same direction, and margin training started
/// from that point tends to park all class weights on the opposite side.
fn center_outputs(model: &Recognizer, images: &ImageBatch) -> Result<()> {
    let n = images.len().min(CENTERING_SAMPLE);
    let mut sum: Option<Tensor> = None;
    for start in (0..n).step_by(128) {
        let batch = images.narrow(start, (n - start).min(128))?;
        let s = model.net.forward(&batch)?.detach().sum(0)?;
        sum = Some(match sum {
            Some(acc) => (acc + s)?,
            None => s,
        });
    }
    let Some(sum) = sum else { return Ok(()) };
    let store = model.net.store();
    let bias = store
        .get(OUTPUT_BIAS)
        .ok_or_else(|| Error::Config(format!("backbone has no {OUTPUT_BIAS}")))?;
    let centered = (bias.as_tensor() - sum.affine(1.0 / n as f64, 0.0)?)?;
    store.set(OUTPUT_BIAS, &centered)
}

const OUTPUT_BIAS: &str = "out.bias";

/// Trains a recognizer on labelled images. With a validation pair set,
/// training stops after `patience` epochs without accuracy improvement and
/// the best epoch's weights are returned; otherwise all epochs run.
pub fn train_recognizer(
    images: &ImageBatch,
    labels: &[usize],
    head: &MarginHeadConfig,
    cfg: &RecognizerTrainConfig,
    validation: Option<&PairSet>,
) -> Result<(Recognizer, RecognizerReport)> {
    cfg.validate()?;
    head.validate()?;
    if images.len() != labels.len() || images.is_empty() {
        return Err(arg_err!("{} images for {} labels", images.len(), labels.len()));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(arg_err!("need at least two identities for verification, got {}", classes.len()));
    }
    if labels.iter().any(|&l| l >= head.n_classes) {
        return Err(arg_err!("labels exceed the head's {} classes", head.n_classes));
    }
    let mut model = Recognizer::new(cfg.cnn.clone(), head.clone(), cfg.seed)?;
    center_outputs(&model, images)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Recognizer)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        if cfg.margin_warmup_epochs > 0 {
            model.head.m = head.m * (epoch as f64 / cfg.margin_warmup_epochs as f64).min(1.0);
        }
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = select(images, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = model.loss(&batch, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite recognizer loss at epoch {epoch}")));
            }
            let grads = loss.backward()?;
            opt.step(model.params(), &grads)?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_accuracy = match validation {
            Some(v) => Some(evaluate_verification(&model.embedder(), v)?.accuracy),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy,
        });
        log::info!("recognizer epoch {epoch}: loss {:.4} val {val_accuracy:?}", loss_sum / seen as f64);
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.deep_clone()?));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let epochs_run = history.len();
    let (mut model, best_epoch, best_val_accuracy) = match best {
        Some((acc, epoch, m)) => (m, epoch, Some(acc)),
        None => (model, epochs_run, None),
    };
    model.head = head.clone();
    Ok((
        model,
        RecognizerReport {
            epochs_run,
            best_epoch,
            best_val_accuracy,
            history,
        },
    ))
}

/// One line of a verification protocol.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProtocolPair {
    pub a: PathBuf,
    pub b: PathBuf,
    pub same: bool,
}

/// Balanced same/different pairs, split into contiguous folds of equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationProtocol {
    pub n_folds: usize,
    pub pairs: Vec<ProtocolPair>,
}

impl VerificationProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(config_err!("need at least two folds, got {}", self.n_folds));
        }
        if self.pairs.len() % self.n_folds != 0 || self.pairs.is_empty() {
            return Err(config_err!("{} pairs do not split into {} equal folds", self.pairs.len(), self.n_folds));
        }
        let positives = self.pairs.iter().filter(|p| p.same).count();
        if 2 * positives != self.pairs.len() {
            return Err(config_err!("protocol is unbalanced: {positives} of {} pairs are positive", self.pairs.len()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            let key = if p.a <= p.b { (&p.a, &p.b) } else { (&p.b, &p.a) };
            if !seen.insert(key) {
                return Err(config_err!("pair {} {} repeats", p.a.display(), p.b.display()));
            }
        }
        Ok(())
    }

    /// `# folds=N` header, then one `pathA pathB 0|1` line per pair.
    pub fn to_text(&self) -> String {
        let mut s = format!("# folds={}\n", self.n_folds);
        for p in &self.pairs {
            let _ = writeln!(s, "{} {} {}", p.a.display(), p.b.display(), u8::from(p.same));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        for p in &self.pairs {
            for q in [&p.a, &p.b] {
                if q.to_string_lossy().contains(char::is_whitespace) {
                    return Err(arg_err!("protocol paths may not contain whitespace: {}", q.display()));
                }
            }
        }
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Parses protocol text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut n_folds = None;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("folds=") {
                    n_folds = Some(v.trim().parse().map_err(|_| Error::format(origin, format!("line {}: bad fold count", i + 1)))?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [a, b, flag] = fields[..] else {
                return Err(Error::format(origin, format!("line {}: expected `pathA pathB 0|1`", i + 1)));
            };
            let same = match flag {
                "0" => false,
                "1" => true,
                _ => return Err(Error::format(origin, format!("line {}: flag must be 0 or 1", i + 1))),
            };
            pairs.push(ProtocolPair {
                a: base.join(a),
                b: base.join(b),
                same,
            });
        }
        let p = Self {
            n_folds: n_folds.unwrap_or(10),
            pairs,
        };
        p.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&read_to_string(path)?, base, path)
    }

    /// Loads each distinct image once.
    pub fn load(&self, channels: usize) -> Result<PairSet> {
        let mut index: BTreeMap<&PathBuf, usize> = BTreeMap::new();
        let mut paths = Vec::new();
        for p in &self.pairs {
            for q in [&p.a, &p.b] {
                index.entry(q).or_insert_with(|| {
                    paths.push(q.clone());
                    paths.len() - 1
                });
            }
        }
        let images = ImageBatch::load_pngs(&paths, channels)?;
        let pairs = self.pairs.iter().map(|p| (index[&p.a], index[&p.b], p.same)).collect();
        Ok(PairSet {
            images,
            pairs,
            n_folds: self.n_folds,
        })
    }
}

/// Builds a protocol of `n_folds` folds, each with `per_fold` positive and
/// `per_fold` negative pairs, drawn without repetition from a dataset.
/// Paths are made absolute.
pub fn build_protocol(data: &LoadedManifest, n_folds: usize, per_fold: usize, seed: u64) -> Result<VerificationProtocol> {
    let ids = &data.manifest.identities;
    if ids.len() < 2 {
        return Err(arg_err!("need at least two identities to build negative pairs"));
    }
    let available_pos: usize = ids.iter().map(|e| e.images.len() * (e.images.len().saturating_sub(1)) / 2).sum();
    let need = n_folds * per_fold;
    if available_pos < need {
        return Err(arg_err!("dataset has only {available_pos} distinct positive pairs, protocol needs {need}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let multi: Vec<usize> = (0..ids.len()).filter(|&i| ids[i].images.len() >= 2).collect();
    let mut draw = |same: bool| -> Result<ProtocolPair> {
        for _ in 0..10_000 {
            let (ia, ib) = if same {
                let i = multi[rng.random_range(0..multi.len())];
                (i, i)
            } else {
                let i = rng.random_range(0..ids.len());
                let j = (i + rng.random_range(1..ids.len())) % ids.len();
                (i, j)
            };
            let ja = rng.random_range(0..ids[ia].images.len());
            let jb = rng.random_range(0..ids[ib].images.len());
            if same && ja == jb {
                continue;
            }
            let key = ((ia, ja).min((ib, jb)), (ia, ja).max((ib, jb)));
            if seen.insert(key) {
                let abs = |p: PathBuf| std::path::absolute(&p).map_err(|e| Error::io(&p, e));
                return Ok(ProtocolPair {
                    a: abs(data.resolve(&ids[ia].images[ja]))?,
                    b: abs(data.resolve(&ids[ib].images[jb]))?,
                    same,
                });
            }
        }
        Err(arg_err!("could not draw enough distinct pairs"))
    };
    let mut pairs = Vec::with_capacity(2 * need);
    for _ in 0..n_folds {
        for _ in 0..per_fold {
            pairs.push(draw(true)?);
        }
        for _ in 0..per_fold {
            pairs.push(draw(false)?);
        }
    }
    let p = VerificationProtocol { n_folds, pairs };
    p.validate()?;
    Ok(p)
}

/// Loaded protocol: images plus `(index A, index B, same)` pairs.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub images: ImageBatch,
    pub pairs: Vec<(usize, usize, bool)>,
    pub n_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Pairs with cosine distance at or below this are declared "same".
    pub threshold: f64,
    /// Accuracy of the threshold on the other folds.
    pub calibration_accuracy: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_positive_rate: f64,
    pub true_positive_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Mean of the per-fold accuracies.
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub folds: Vec<FoldResult>,
    pub roc: Vec<RocPoint>,
}

impl VerificationResult {
    pub fn report(&self) -> String {
        let mut s = format!(
            "accuracy = {:.6}\naccuracy_std = {:.6}\n\n# fold threshold calibration_accuracy accuracy\n",
            self.accuracy, self.accuracy_std
        );
        for (i, f) in self.folds.iter().enumerate() {
            let _ = writeln!(s, "{i} {:.6} {:.6} {:.6}", f.threshold, f.calibration_accuracy, f.accuracy);
        }
        s.push_str("\n# threshold false_positive_rate true_positive_rate\n");
        for p in &self.roc {
            let _ = writeln!(s, "{:.6} {:.6} {:.6}", p.threshold, p.false_positive_rate, p.true_positive_rate);
        }
        s
    }
}

/// Candidate thresholds: below every score, between each pair of distinct
/// neighbouring scores, and above every score.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    match (s.first(), s.last()) {
        (Some(&lo), Some(&hi)) => {
            out.push(lo - 1.0);
            out.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            out.push(hi + 1.0);
        }
        _ => out.push(0.0),
    }
    out
}

pub fn accuracy_at(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scored.iter().filter(|(d, same)| (*d <= threshold) == *same).count();
    correct as f64 / scored.len() as f64
}

/// Most accurate threshold by a single sorted sweep; ties go to the lowest.
pub fn best_threshold(scored: &[(f64, bool)]) -> (f64, f64) {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let negatives = sorted.iter().filter(|(_, s)| !s).count();
    let thresholds = candidate_thresholds(&sorted.iter().map(|x| x.0).collect::<Vec<_>>());
    // The lowest candidate accepts nothing: every negative is right.
    let mut correct = negatives;
    let mut best = (thresholds[0], correct);
    let mut i = 0;
    for &t in &thresholds[1..] {
        while i < n && sorted[i].0 <= t {
            correct = if sorted[i].1 { correct + 1 } else { correct - 1 };
            i += 1;
        }
        if correct > best.1 {
            best = (t, correct);
        }
    }
    (best.0, best.1 as f64 / n as f64)
}

fn cosine_distances(emb: &[Vec<f64>], pairs: &[(usize, usize, bool)]) -> Vec<(f64, bool)> {
    pairs
        .par_iter()
        .map(|&(a, b, same)| {
            let dot: f64 = emb[a].iter().zip(&emb[b]).map(|(x, y)| x * y).sum();
            (1.0 - dot, same)
        })
        .collect()
}

/// Verification accuracy with thresholds chosen on the complementary folds.
pub fn evaluate_verification(embedder: &dyn Embedder, set: &PairSet) -> Result<VerificationResult> {
    let emb: Vec<Vec<f64>> = embedder
        .embed(&set.images)?
        .into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect();
    evaluate_embeddings(&emb, &set.pairs, set.n_folds)
}

/// Same as [`evaluate_verification`] on precomputed unit embeddings.
pub fn evaluate_embeddings(emb: &[Vec<f64>], pairs: &[(usize, usize, bool)], n_folds: usize) -> Result<VerificationResult> {
    if n_folds < 2 || pairs.len() < n_folds {
        return Err(config_err!("cannot split {} pairs into {n_folds} folds", pairs.len()));
    }
    let scored = cosine_distances(emb, pairs);
    let fold_of = |i: usize| i * n_folds / scored.len();
    let folds: Vec<FoldResult> = (0..n_folds)
        .map(|f| {
            let calib: Vec<(f64, bool)> = scored.iter().enumerate().filter(|(i, _)| fold_of(*i) != f).map(|(_, x)| *x).collect();
            let test: Vec<(f64, bool)> = scored.iter().enumerate().filter(|(i, _)| fold_of(*i) == f).map(|(_, x)| *x).collect();
            let (threshold, calibration_accuracy) = best_threshold(&calib);
            FoldResult {
                threshold,
                calibration_accuracy,
                accuracy: accuracy_at(&test, threshold),
            }
        })
        .collect();
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
    let positives = scored.iter().filter(|x| x.1).count().max(1) as f64;
    let negatives = scored.iter().filter(|x| !x.1).count().max(1) as f64;
    let roc = candidate_thresholds(&scored.iter().map(|x| x.0).collect::<Vec<_>>())
        .into_iter()
        .map(|t| {
            let tp = scored.iter().filter(|(d, s)| *s && *d <= t).count() as f64;
            let fp = scored.iter().filter(|(d, s)| !*s && *d <= t).count() as f64;
            RocPoint {
                threshold: t,
                false_positive_rate: fp / negatives,
                true_positive_rate: tp / positives,
            }
        })
        .collect();
    Ok(VerificationResult {
        accuracy: mean,
        accuracy_std: var.sqrt(),
        folds,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{IdentityFactors, OracleWorld, OracleWorldSpec, PoseFactors};

    #[test]
    fn sweep_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            let scored: Vec<(f64, bool)> = (0..n)
                .map(|_| ((rng.random_range(0..8) as f64) / 4.0, rng.random_bool(0.5)))
                .collect();
            let (t, acc) = best_threshold(&scored);
            let brute = candidate_thresholds(&scored.iter().map(|x| x.0).collect::<Vec<_>>())
                .into_iter()
                .map(|t| accuracy_at(&scored, t))
                .fold(0.0, f64::max);
            assert_eq!(acc, brute);
            assert_eq!(accuracy_at(&scored, t), acc);
        }
    }

    #[test]
    fn constant_embeddings_score_one_half() {
        let emb = vec![vec![1.0, 0.0]; 40];
        let pairs: Vec<_> = (0..40).map(|i| (i, (i + 1) % 40, i % 2 == 0)).collect();
        let r = evaluate_embeddings(&emb, &pairs, 10).unwrap();
        assert!((r.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn protocol_text_round_trip() {
        let p = VerificationProtocol {
            n_folds: 2,
            pairs: vec![
                ProtocolPair { a: "x/a.png".into(), b: "x/b.png".into(), same: true },
                ProtocolPair { a: "x/a.png".into(), b: "y/c.png".into(), same: false },
                ProtocolPair { a: "y/c.png".into(), b: "y/d.png".into(), same: true },
                ProtocolPair { a: "x/b.png".into(), b: "y/d.png".into(), same: false },
            ],
        };
        let text = p.to_text();
        assert!(text.starts_with("# folds=2\n"));
        let back = VerificationProtocol::parse(&text, Path::new(""), Path::new("p.txt")).unwrap();
        assert_eq!(back, p);
        let bad = text.replace(" 1\n", " 2\n");
        assert!(VerificationProtocol::parse(&bad, Path::new(""), Path::new("p.txt")).is_err());
    }

    #[test]
    fn repeated_pairs_are_rejected() {
        let pair = ProtocolPair { a: "a".into(), b: "b".into(), same: true };
        let swapped = ProtocolPair { a: "b".into(), b: "a".into(), same: false };
        let p = VerificationProtocol {
            n_folds: 2,
            pairs: vec![pair, swapped],
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_identity_training_is_rejected() {
        let world = OracleWorld::new(OracleWorldSpec::default()).unwrap();
        let id = IdentityFactors::from_index(0).unwrap();
        let imgs = world
            .render_batch(&[(id.clone(), PoseFactors::new(0.0, 0.0, 0.0)), (id, PoseFactors::new(0.1, 0.0, 0.0))])
            .unwrap();
        let head = MarginHeadConfig::default();
        let r = train_recognizer(&imgs, &[0, 0], &head, &RecognizerTrainConfig::default(), None);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn two_identities_are_learned_and_survive_save_load() {
        let world = OracleWorld::new(OracleWorldSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = [IdentityFactors::from_index(3).unwrap(), IdentityFactors::from_index(200).unwrap()];
        let items: Vec<_> = (0..64).map(|i| (ids[i % 2].clone(), world.sample_pose(&mut rng))).collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let imgs = world.render_batch(&items).unwrap();
        let head = MarginHeadConfig { n_classes: 2, ..Default::default() };
        let cfg = RecognizerTrainConfig {
            max_epochs: 100,
            batch_size: 32,
            ..Default::default()
        };
        // 100 epochs of two batches: 200 optimizer steps.
        let (model, report) = train_recognizer(&imgs, &labels, &head, &cfg, None).unwrap();
        let last = report.history.last().unwrap().train_loss;
        assert!(last < 0.1, "final loss {last}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.safetensors");
        model.save(&path).unwrap();
        let back = Recognizer::load(&path).unwrap();
        let a = model.embed_vec(&imgs).unwrap();
        let b = back.embed_vec(&imgs).unwrap();
        assert_eq!(a, b);
        for e in &b {
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let via_provider = ToyEmbedder::load(&path).unwrap().embed(&imgs).unwrap();
        assert_eq!(via_provider[0].iter().map(|&x| x as f64).collect::<Vec<_>>(), b[0]);
    }
}
