//! Entropy-gap membership inference against a margin-softmax recognizer.
//!
//! Each sample is scored by the entropy (in nats) of the recognizer's
//! softmax output. Training members tend to get confident, low-entropy
//! predictions.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::image::ImageBatch;
use crate::margin::{angular_logits, angular_logits_tensor, MarginHeadConfig};
use crate::ops;
use crate::recognition::Recognizer;

/// Which class receives the angular margin when scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginPolicy {
    /// Members: their true class. Non-members: the class whose weight is
    /// closest by cosine. Biased even for an untrained model, since only the
    /// non-members' margin always lands on their top class.
    NearestClass,
    /// Members: their true class. Non-members: no margin.
    NonMembersPlain,
    /// No margin for anyone; plain scaled cosine logits.
    #[default]
    Plain,
}

/// `-sum p ln p` of a probability vector, clamped to `[0, ln K]` against
/// round-off.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    h.clamp(0.0, (p.len() as f64).ln())
}

fn entropy_from_log_probs(logp: &[f64]) -> f64 {
    let h: f64 = -logp.iter().map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>();
    h.clamp(0.0, (logp.len() as f64).ln())
}

/// Softmax entropy of the margin logits of one embedding.
pub fn prediction_entropy(e: &[f64], class_weights: &[Vec<f64>], label: usize, head: &MarginHeadConfig) -> Result<f64> {
    let logits = angular_logits(e, class_weights, label, head)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    Ok(entropy_from_log_probs(&logp))
}

/// Index of the class weight with the largest cosine to `e`.
pub fn nearest_class(e: &[f64], class_weights: &[Vec<f64>]) -> usize {
    class_weights
        .iter()
        .map(|w| w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub id: String,
    pub member: bool,
    /// Nats.
    pub entropy: f64,
}

/// Entropies for a batch of unit embeddings. `labels[i]` is the class that
/// receives the margin, or `None` for plain logits.
pub fn batch_entropies(
    emb: &[Vec<f64>],
    labels: &[Option<usize>],
    class_weights: &[Vec<f64>],
    head: &MarginHeadConfig,
) -> Result<Vec<f64>> {
    if emb.len() != labels.len() {
        return Err(arg_err!("{} embeddings for {} labels", emb.len(), labels.len()));
    }
    let d = class_weights.first().map(|w| w.len()).unwrap_or(0);
    let k = class_weights.len();
    let wt = Tensor::from_vec(class_weights.iter().flatten().copied().collect::<Vec<_>>(), (k, d), &Device::Cpu)?;
    let mut out = vec![0.0; emb.len()];
    let plain = MarginHeadConfig { m: 0.0, ..head.clone() };
    for with_margin in [true, false] {
        let rows: Vec<usize> = (0..emb.len()).filter(|&i| labels[i].is_some() == with_margin).collect();
        if rows.is_empty() {
            continue;
        }
        let flat: Vec<f64> = rows.iter().flat_map(|&i| emb[i].iter().copied()).collect();
        let et = Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?;
        let y: Vec<usize> = rows.iter().map(|&i| labels[i].unwrap_or(0)).collect();
        let cfg = if with_margin { head } else { &plain };
        let logp = ops::log_softmax(&angular_logits_tensor(&et, &wt, &y, cfg)?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (r, &i) in rows.iter().enumerate() {
            out[i] = entropy_from_log_probs(&logp[r]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub members: usize,
    pub nonmembers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub policy: MarginPolicy,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Share of members among the lowest-entropy `ceil(N/2)` samples; ties
    /// at the cutoff count fractionally.
    pub member_fraction_lowest_half: f64,
    /// AUC of negated entropy as a membership score (rank statistic).
    pub auc: f64,
    pub mean_entropy_members: f64,
    pub mean_entropy_nonmembers: f64,
    pub histogram: Vec<HistogramBin>,
    /// All records, ascending entropy.
    pub records: Vec<EntropyRecord>,
}

impl AttackReport {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy = {:?}", self.policy);
        let _ = writeln!(s, "members = {}", self.n_members);
        let _ = writeln!(s, "nonmembers = {}", self.n_nonmembers);
        let _ = writeln!(s, "member_fraction_lowest_half = {:.6}", self.member_fraction_lowest_half);
        let _ = writeln!(s, "auc = {:.6}", self.auc);
        let _ = writeln!(s, "mean_entropy_members = {:.6}", self.mean_entropy_members);
        let _ = writeln!(s, "mean_entropy_nonmembers = {:.6}", self.mean_entropy_nonmembers);
        s.push_str("\n# entropy_bin_center members nonmembers\n");
        for b in &self.histogram {
            let _ = writeln!(s, "{:.6} {} {}", b.center, b.members, b.nonmembers);
        }
        s.push_str("\n# rank id member entropy\n");
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {:.9}", r.id, u8::from(r.member), r.entropy);
        }
        s
    }
}

/// Member share of the lowest `ceil(N/2)` entropies.
pub fn member_fraction_lowest_half(records: &[EntropyRecord]) -> f64 {
    let mut sorted: Vec<&EntropyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
    let cutoff = sorted.len().div_ceil(2);
    if cutoff == 0 {
        return 0.0;
    }
    let v = sorted[cutoff - 1].entropy;
    let below: Vec<_> = sorted.iter().filter(|r| r.entropy < v).collect();
    let tied: Vec<_> = sorted.iter().filter(|r| r.entropy == v).collect();
    let members_below = below.iter().filter(|r| r.member).count() as f64;
    let slots = (cutoff - below.len()) as f64;
    let tied_members = tied.iter().filter(|r| r.member).count() as f64;
    (members_below + slots * tied_members / tied.len() as f64) / cutoff as f64
}

/// Probability that a random member has lower entropy than a random
/// non-member, ties counting one half (mid-rank Mann-Whitney statistic).
pub fn auc_rank(records: &[EntropyRecord]) -> f64 {
    let mut sorted: Vec<&EntropyRecord> = records.iter().collect();
    // Descending entropy: ascending membership score.
    sorted.sort_by(|a, b| b.entropy.total_cmp(&a.entropy));
    let n_m = sorted.iter().filter(|r| r.member).count() as f64;
    let n_n = sorted.len() as f64 - n_m;
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].entropy == sorted[i].entropy {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|r| r.member).count() as f64;
        i = j;
    }
    (rank_sum - n_m * (n_m + 1.0) / 2.0) / (n_m * n_n)
}

/// Same AUC by trapezoidal integration of the ROC curve obtained by
/// sweeping an entropy threshold from low to high.
pub fn auc_trapezoid(records: &[EntropyRecord]) -> f64 {
    let mut sorted: Vec<&EntropyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.entropy.total_cmp(&b.entropy));
    let n_m = sorted.iter().filter(|r| r.member).count() as f64;
    let n_n = sorted.len() as f64 - n_m;
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].entropy == sorted[i].entropy {
            if sorted[j].member {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let (tpr, fpr) = (tp / n_m, fp / n_n);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    area
}

fn histogram(records: &[EntropyRecord], n_classes: usize, bins: usize) -> Vec<HistogramBin> {
    let top = (n_classes as f64).ln().max(f64::MIN_POSITIVE);
    let width = top / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            center: (b as f64 + 0.5) * width,
            members: 0,
            nonmembers: 0,
        })
        .collect();
    for r in records {
        let b = ((r.entropy / width) as usize).min(bins - 1);
        if r.member {
            out[b].members += 1;
        } else {
            out[b].nonmembers += 1;
        }
    }
    out
}

const HISTOGRAM_BINS: usize = 20;

/// Summarizes scored records.
pub fn summarize(records: Vec<EntropyRecord>, n_classes: usize, policy: MarginPolicy) -> Result<AttackReport> {
    let n_members = records.iter().filter(|r| r.member).count();
    let n_nonmembers = records.len() - n_members;
    if n_members == 0 || n_nonmembers == 0 {
        return Err(arg_err!("need both members and non-members, got {n_members} and {n_nonmembers}"));
    }
    let mean = |m: bool, n: usize| records.iter().filter(|r| r.member == m).map(|r| r.entropy).sum::<f64>() / n as f64;
    let mut sorted = records.clone();
    sorted.sort_by(|a, b| a.entropy.total_cmp(&b.entropy).then_with(|| a.id.cmp(&b.id)));
    Ok(AttackReport {
        policy,
        n_members,
        n_nonmembers,
        member_fraction_lowest_half: member_fraction_lowest_half(&records),
        auc: auc_rank(&records),
        mean_entropy_members: mean(true, n_members),
        mean_entropy_nonmembers: mean(false, n_nonmembers),
        histogram: histogram(&records, n_classes, HISTOGRAM_BINS),
        records: sorted,
    })
}

/// Scores members with their true labels and non-members per `policy`.
pub fn attack_embeddings(
    members: &[Vec<f64>],
    member_labels: &[usize],
    nonmembers: &[Vec<f64>],
    class_weights: &[Vec<f64>],
    head: &MarginHeadConfig,
    policy: MarginPolicy,
) -> Result<AttackReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(arg_err!("member and non-member sets must be non-empty"));
    }
    if member_labels.len() != members.len() {
        return Err(arg_err!("{} member labels for {} members", member_labels.len(), members.len()));
    }
    let member_margin: Vec<Option<usize>> = member_labels
        .iter()
        .map(|&l| if policy == MarginPolicy::Plain { None } else { Some(l) })
        .collect();
    let nonmember_margin: Vec<Option<usize>> = nonmembers
        .iter()
        .map(|e| match policy {
            MarginPolicy::NearestClass => Some(nearest_class(e, class_weights)),
            _ => None,
        })
        .collect();
    let h_m = batch_entropies(members, &member_margin, class_weights, head)?;
    let h_n = batch_entropies(nonmembers, &nonmember_margin, class_weights, head)?;
    let records = h_m
        .into_iter()
        .enumerate()
        .map(|(i, h)| EntropyRecord {
            id: format!("member_{i}"),
            member: true,
            entropy: h,
        })
        .chain(h_n.into_iter().enumerate().map(|(i, h)| EntropyRecord {
            id: format!("nonmember_{i}"),
            member: false,
            entropy: h,
        }))
        .collect();
    summarize(records, class_weights.len(), policy)
}

/// Full attack against a recognizer, using only its embeddings, class
/// weights and head settings (the inputs to its logits).
pub fn run_attack(
    model: &Recognizer,
    members: &ImageBatch,
    member_labels: &[usize],
    nonmembers: &ImageBatch,
    policy: MarginPolicy,
) -> Result<AttackReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(arg_err!("member and non-member sets must be non-empty"));
    }
    let w = model.class_weights_vec()?;
    let em = model.embed_vec(members)?;
    let en = model.embed_vec(nonmembers)?;
    attack_embeddings(&em, member_labels, &en, &w, model.head(), policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(member: bool, entropy: f64) -> EntropyRecord {
        EntropyRecord {
            id: String::new(),
            member,
            entropy,
        }
    }

    #[test]
    fn entropy_reference_cases() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fraction_with_ties_at_the_cutoff() {
        // Cutoff 2: one clear member, then a two-way tie with one member.
        let r = vec![rec(true, 0.1), rec(true, 0.5), rec(false, 0.5), rec(false, 0.9)];
        assert!((member_fraction_lowest_half(&r) - 0.75).abs() < 1e-12);
        let odd = vec![rec(true, 0.1), rec(false, 0.2), rec(false, 0.3)];
        assert!((member_fraction_lowest_half(&odd) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_forms_agree_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let records: Vec<_> = (0..rng.random_range(2..80))
                .map(|i| rec(i % 2 == 0 || rng.random_bool(0.3), rng.random_range(0..10) as f64 / 10.0))
                .collect();
            if records.iter().all(|r| r.member) {
                continue;
            }
            assert!((auc_rank(&records) - auc_trapezoid(&records)).abs() < 1e-9);
        }
        let perfect = vec![rec(true, 0.0), rec(true, 0.1), rec(false, 0.5)];
        assert_eq!(auc_rank(&perfect), 1.0);
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn batch_matches_single_sample_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<Vec<f64>> = (0..5).map(|_| unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let e: Vec<Vec<f64>> = (0..6).map(|_| unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let head = MarginHeadConfig { n_classes: 5, ..Default::default() };
        let labels: Vec<Option<usize>> = (0..6).map(|i| Some(i % 5)).collect();
        let batch = batch_entropies(&e, &labels, &w, &head).unwrap();
        for i in 0..6 {
            let single = prediction_entropy(&e[i], &w, i % 5, &head).unwrap();
            assert!((batch[i] - single).abs() < 1e-9);
            assert!((0.0..=5f64.ln()).contains(&batch[i]));
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let head = MarginHeadConfig::default();
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = attack_embeddings(&[], &[], &[vec![1.0, 0.0]], &w, &head, MarginPolicy::default());
        assert!(matches!(r, Err(crate::Error::Argument(_))));
    }

    #[test]
    fn confident_members_are_found() {
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let head = MarginHeadConfig { s: 16.0, m: 0.5, n_classes: 2 };
        let members: Vec<Vec<f64>> = (0..10).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let nonmembers = vec![unit(vec![1.0, 1.0]); 10];
        let rep = attack_embeddings(&members, &labels, &nonmembers, &w, &head, MarginPolicy::NearestClass).unwrap();
        assert_eq!(rep.member_fraction_lowest_half, 1.0);
        assert_eq!(rep.auc, 1.0);
        assert_eq!(rep.histogram.iter().map(|b| b.members + b.nonmembers).sum::<usize>(), 20);
        assert!(rep.report().contains("auc = 1.000000"));
    }
}
