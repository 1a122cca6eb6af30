//! Additive angular margin head.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::ops;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginHeadConfig {
    /// Feature scale applied to every cosine.
    pub s: f64,
    /// Additive angular margin on the true class, radians.
    pub m: f64,
    pub n_classes: usize,
}

impl Default for MarginHeadConfig {
    fn default() -> Self {
        Self {
            s: 64.0,
            m: 0.5,
            n_classes: 2,
        }
    }
}

impl MarginHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(config_err!("feature scale s must be positive, got {}", self.s));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return Err(config_err!("margin m must lie in [0, pi/2), got {}", self.m));
        }
        if self.n_classes == 0 {
            return Err(config_err!("n_classes must be positive"));
        }
        Ok(())
    }
}

/// One-hot `[B, K]` mask in `dtype`.
pub fn one_hot(labels: &[usize], n_classes: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(arg_err!("label {l} out of range for {n_classes} classes"));
        }
        data[i * n_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), n_classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Margin logits `[B, K]` for embeddings `e` `[B, d]` against unit class
/// weights `w` `[K, d]`. Non-target entries are `s * cos(theta_j)`, the
/// target entry is `s * cos(theta_label + m)`, with
/// `theta = arccos(clip(e . w, -1, 1))`.
///
/// Past `theta = pi - m`, `cos(theta + m)` would start rising again and
/// reward embeddings that point away from their class; there the target
/// entry continues as `s * (cos(theta) - m * sin(m))`, which keeps it
/// decreasing in `theta`.
pub fn angular_logits_tensor(
    e: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &MarginHeadConfig,
) -> Result<Tensor> {
    let (b, _) = e.dims2()?;
    let (k, _) = class_weights.dims2()?;
    if labels.len() != b {
        return Err(arg_err!("{} labels for {b} embeddings", labels.len()));
    }
    if k != cfg.n_classes {
        return Err(config_err!("{k} class weights for a head with {} classes", cfg.n_classes));
    }
    let cos = e.matmul(&class_weights.t()?)?;
    let mask = one_hot(labels, k, cos.dtype())?;
    if cfg.m == 0.0 {
        return Ok(cos.affine(cfg.s, 0.0)?);
    }
    let shifted = ops::acos(&cos)?.affine(1.0, cfg.m)?.cos()?;
    let fallback = cos.affine(1.0, -cfg.m * cfg.m.sin())?;
    let threshold = (std::f64::consts::PI - cfg.m).cos();
    let in_range = cos.ge(threshold)?;
    let target = in_range.where_cond(&shifted, &fallback)?;
    let delta = ((target - &cos)? * mask)?;
    Ok((cos + delta)?.affine(cfg.s, 0.0)?)
}

/// Plain-slice form of [`angular_logits_tensor`] for one embedding.
pub fn angular_logits(
    e: &[f64],
    class_weights: &[Vec<f64>],
    label: usize,
    cfg: &MarginHeadConfig,
) -> Result<Vec<f64>> {
    if label >= class_weights.len() {
        return Err(arg_err!("label {label} out of range for {} classes", class_weights.len()));
    }
    let d = e.len();
    if class_weights.iter().any(|w| w.len() != d) {
        return Err(config_err!("class weights must all have dimension {d}"));
    }
    let et = Tensor::from_slice(e, (1, d), &Device::Cpu)?;
    let flat: Vec<f64> = class_weights.iter().flatten().copied().collect();
    let wt = Tensor::from_vec(flat, (class_weights.len(), d), &Device::Cpu)?;
    let out = angular_logits_tensor(&et, &wt, &[label], cfg)?;
    Ok(out.squeeze(0)?.to_vec1()?)
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(ops::log_softmax(logits)?.exp()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn target_logit_on_its_own_weight() {
        let w = vec![unit(&[1.0, 2.0, -0.5]), unit(&[0.0, 1.0, 1.0])];
        let cfg = MarginHeadConfig {
            s: 64.0,
            m: 0.5,
            n_classes: 2,
        };
        let l = angular_logits(&w[0], &w, 0, &cfg).unwrap();
        // 64 cos(0.5) = 56.16528...
        assert!((l[0] - 56.165_283_960_983_86).abs() < 1e-6, "{}", l[0]);
        let cos01: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
        assert!((l[1] - 64.0 * cos01).abs() < 1e-12);
    }

    #[test]
    fn target_logit_keeps_falling_past_pi_minus_m() {
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = MarginHeadConfig {
            s: 1.0,
            m: 0.5,
            n_classes: 2,
        };
        let at = |theta: f64| angular_logits(&[theta.cos(), theta.sin()], &w, 0, &cfg).unwrap()[0];
        let mut prev = at(0.0);
        for i in 1..=100 {
            let theta = std::f64::consts::PI * i as f64 / 100.0;
            let l = at(theta);
            assert!(l < prev, "theta {theta}: {l} >= {prev}");
            prev = l;
        }
        // Opposite direction: cos(pi) - m sin(m).
        assert!((at(std::f64::consts::PI) - (-1.0 - 0.5 * 0.5f64.sin())).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_weight_gives_zero_logit() {
        let w = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = MarginHeadConfig {
            s: 1.0,
            m: 0.0,
            n_classes: 2,
        };
        let l = angular_logits(&[1.0, 0.0], &w, 0, &cfg).unwrap();
        assert_eq!(l[1], 0.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let w = vec![vec![1.0, 0.0]];
        let cfg = MarginHeadConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(matches!(
            angular_logits(&[1.0, 0.0], &w, 1, &cfg),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn slightly_out_of_domain_dot_products_stay_finite() {
        let w = vec![vec![1.0 + 1e-6, 0.0], vec![-1.0 - 1e-6, 0.0]];
        let cfg = MarginHeadConfig {
            n_classes: 2,
            ..Default::default()
        };
        for label in 0..2 {
            let l = angular_logits(&[1.0, 0.0], &w, label, &cfg).unwrap();
            assert!(l.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_validation() {
        assert!(MarginHeadConfig::default().validate().is_ok());
        for (s, m) in [(0.0, 0.5), (64.0, -0.1), (64.0, 1.6)] {
            let c = MarginHeadConfig {
                s,
                m,
                n_classes: 3,
            };
            assert!(c.validate().is_err());
        }
    }
}
