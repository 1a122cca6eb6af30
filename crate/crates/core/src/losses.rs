//! Adversarial objective and the four clamped disentanglement losses.
//!
//! With `+` meaning "same identity" and `-` meaning "different identity":
//!
//! * `l_pull  =  max(theta_same, tau_pull)`: pull same-identity embeddings
//!   together until their angle drops below `tau_pull`;
//! * `l_push  = -min(theta_diff, tau_push)`: push different-identity
//!   embeddings apart until their angle exceeds `tau_push`;
//! * `l_vary  = -min(|P(I0) - P(I+)|^2, tau_vary)`: reward pose variation
//!   between same-identity samples, up to `tau_vary`;
//! * `l_match =  min(|P(I0) - P(I-)|^2, tau_match)`: penalize pose mismatch
//!   between same-pose samples, capped at `tau_match`.
//!
//! Each clamp caps the value per sample, which also zeroes the gradient of
//! that sample beyond its threshold. Batch losses are means over samples.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::ops;

/// Largest cosine passed to arccos.
pub const ACOS_CLIP: f64 = 1.0 - 1e-7;
/// Tolerance on embedding norms.
const UNIT_TOLERANCE: f64 = 1e-3;

/// Generator side of the adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorObjective {
    /// `-mean log sigma(D(G(z)))`.
    #[default]
    NonSaturating,
    /// `mean log(1 - sigma(D(G(z))))`, the literal minimax form.
    Minimax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_aux: f64,
    pub tau_pull: f64,
    pub tau_push: f64,
    pub tau_vary: f64,
    pub tau_match: f64,
    pub generator_objective: GeneratorObjective,
    /// Weight of the R1 penalty on real images; zero disables it.
    pub r1_weight: f64,
    /// Perturbation scale of the finite-difference R1 estimate.
    pub r1_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_aux: 0.1,
            tau_pull: 0.70,
            tau_push: 1.40,
            tau_vary: 3.0,
            tau_match: 5.0,
            generator_objective: GeneratorObjective::NonSaturating,
            r1_weight: 1.0,
            r1_sigma: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let taus = [self.tau_pull, self.tau_push, self.tau_vary, self.tau_match];
        if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(config_err!("loss thresholds must be positive"));
        }
        if self.tau_pull >= self.tau_push {
            return Err(config_err!(
                "tau_pull ({}) must be below tau_push ({})",
                self.tau_pull,
                self.tau_push
            ));
        }
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return Err(config_err!("lambda_aux must be non-negative"));
        }
        if !(self.r1_weight >= 0.0) || !(self.r1_sigma > 0.0) {
            return Err(config_err!("r1_weight must be >= 0 and r1_sigma > 0"));
        }
        Ok(())
    }
}

/// `(d_loss, g_loss)` from discriminator logits on real and generated images.
pub fn gan_losses(real_scores: &Tensor, fake_scores: &Tensor, objective: GeneratorObjective) -> Result<(Tensor, Tensor)> {
    if real_scores.elem_count() == 0 || fake_scores.elem_count() == 0 {
        return Err(arg_err!("empty score batch"));
    }
    // -log sigma(x) = softplus(-x), -log(1 - sigma(x)) = softplus(x).
    let d_real = ops::softplus(&real_scores.neg()?)?.mean_all()?;
    let d_fake = ops::softplus(fake_scores)?.mean_all()?;
    let d_loss = (d_real + d_fake)?;
    let g_loss = match objective {
        GeneratorObjective::NonSaturating => ops::softplus(&fake_scores.neg()?)?.mean_all()?,
        GeneratorObjective::Minimax => ops::softplus(fake_scores)?.mean_all()?.neg()?,
    };
    Ok((d_loss, g_loss))
}

fn check_unit(e: &Tensor, what: &str) -> Result<()> {
    let norms: Vec<f64> = e
        .detach()
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1()?;
    if let Some(n) = norms.iter().find(|n| (*n - 1.0).abs() > UNIT_TOLERANCE) {
        return Err(arg_err!("{what} embeddings must be unit norm, found norm {n}"));
    }
    Ok(())
}

/// Per-sample angles `[B]` between matching rows of two unit-norm batches.
pub fn angles(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(config_err!("embedding shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let cos = (a * b)?.sum(1)?.clamp(-ACOS_CLIP, ACOS_CLIP)?;
    Ok(ops::acos(&cos)?)
}

/// Per-sample squared distances `[B]`.
pub fn squared_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(config_err!("pose shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.sum(1)?)
}

/// Batch-mean identity losses plus mean angles.
pub struct IdentityLosses {
    pub l_pull: Tensor,
    pub l_push: Tensor,
    pub theta_same: Tensor,
    pub theta_diff: Tensor,
}

pub fn identity_losses(e0: &Tensor, e_plus: &Tensor, e_minus: &Tensor, cfg: &LossConfig) -> Result<IdentityLosses> {
    check_unit(e0, "anchor")?;
    check_unit(e_plus, "same-identity")?;
    check_unit(e_minus, "different-identity")?;
    let theta_same = angles(e0, e_plus)?;
    let theta_diff = angles(e0, e_minus)?;
    Ok(IdentityLosses {
        l_pull: theta_same.maximum(cfg.tau_pull)?.mean_all()?,
        l_push: theta_diff.minimum(cfg.tau_push)?.mean_all()?.neg()?,
        theta_same: theta_same.mean_all()?,
        theta_diff: theta_diff.mean_all()?,
    })
}

/// Batch-mean pose losses plus mean squared distances.
pub struct PoseLosses {
    pub l_vary: Tensor,
    pub l_match: Tensor,
    pub d_vary: Tensor,
    pub d_match: Tensor,
}

pub fn pose_losses(p0: &Tensor, p_plus: &Tensor, p_minus: &Tensor, cfg: &LossConfig) -> Result<PoseLosses> {
    for p in [p0, p_plus, p_minus] {
        match p.dims() {
            [_, 3] => {}
            d => return Err(config_err!("pose batch must be [B, 3], got {d:?}")),
        }
    }
    let d_vary = squared_distances(p0, p_plus)?;
    let d_match = squared_distances(p0, p_minus)?;
    Ok(PoseLosses {
        l_vary: d_vary.minimum(cfg.tau_vary)?.mean_all()?.neg()?,
        l_match: d_match.minimum(cfg.tau_match)?.mean_all()?,
        d_vary: d_vary.mean_all()?,
        d_match: d_match.mean_all()?,
    })
}

/// The four auxiliary terms as differentiable scalars.
pub struct AuxLosses {
    pub identity: IdentityLosses,
    pub pose: PoseLosses,
}

impl AuxLosses {
    /// Unweighted sum of the four clamped terms.
    pub fn sum(&self) -> Result<Tensor> {
        Ok((((&self.identity.l_pull + &self.identity.l_push)? + &self.pose.l_vary)? + &self.pose.l_match)?)
    }

    pub fn report(&self, cfg: &LossConfig) -> Result<AuxLossReport> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        let l_pull = v(&self.identity.l_pull)?;
        let l_push = v(&self.identity.l_push)?;
        let l_vary = v(&self.pose.l_vary)?;
        let l_match = v(&self.pose.l_match)?;
        Ok(AuxLossReport {
            l_pull,
            l_push,
            l_vary,
            l_match,
            theta_same: v(&self.identity.theta_same)?,
            theta_diff: v(&self.identity.theta_diff)?,
            d_vary: v(&self.pose.d_vary)?,
            d_match: v(&self.pose.d_match)?,
            total_aux: cfg.lambda_aux * (l_pull + l_push + l_vary + l_match),
        })
    }
}

/// Plain values of the auxiliary losses for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLossReport {
    pub l_pull: f64,
    pub l_push: f64,
    pub l_vary: f64,
    pub l_match: f64,
    pub theta_same: f64,
    pub theta_diff: f64,
    pub d_vary: f64,
    pub d_match: f64,
    pub total_aux: f64,
}

/// `g_loss + lambda_aux * (l_pull + l_push + l_vary + l_match)`.
pub fn total_generator_loss(g_loss: &Tensor, aux: &AuxLosses, cfg: &LossConfig) -> Result<Tensor> {
    if cfg.lambda_aux == 0.0 {
        return Ok(g_loss.clone());
    }
    Ok((g_loss + aux.sum()?.affine(cfg.lambda_aux, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    fn unit2(theta: f64) -> Tensor {
        row(&[theta.cos(), theta.sin()])
    }

    #[test]
    fn gan_losses_at_zero_logits() {
        let z = t(&[0.0, 0.0, 0.0]);
        let (d, g) = gan_losses(&z, &z, GeneratorObjective::NonSaturating).unwrap();
        assert!((scalar(&d) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&g) - 2f64.ln()).abs() < 1e-12);
        let (_, g) = gan_losses(&z, &z, GeneratorObjective::Minimax).unwrap();
        assert!((scalar(&g) + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_vanishing_loss() {
        let (d, _) = gan_losses(&t(&[60.0]), &t(&[-60.0]), GeneratorObjective::NonSaturating).unwrap();
        assert!(scalar(&d) < 1e-20);
    }

    #[test]
    fn empty_scores_are_rejected() {
        let e = t(&[]);
        assert!(gan_losses(&e, &t(&[0.0]), GeneratorObjective::NonSaturating).is_err());
    }

    #[test]
    fn generator_loss_decreases_with_fake_score() {
        let mut prev = f64::INFINITY;
        for s in [-5.0, -1.0, 0.0, 0.5, 3.0, 10.0] {
            let (_, g) = gan_losses(&t(&[0.0]), &t(&[s]), GeneratorObjective::NonSaturating).unwrap();
            assert!(scalar(&g) < prev);
            prev = scalar(&g);
        }
    }

    #[test]
    fn identical_embeddings_hit_the_pull_floor() {
        let e = unit2(0.3);
        let l = identity_losses(&e, &e, &unit2(2.0), &LossConfig::default()).unwrap();
        assert!(scalar(&l.theta_same) < 1e-3);
        assert_eq!(scalar(&l.l_pull), 0.70);
    }

    #[test]
    fn push_boundary_value() {
        let l = identity_losses(&unit2(0.0), &unit2(0.1), &unit2(1.40), &LossConfig::default()).unwrap();
        assert!((scalar(&l.l_push) + 1.40).abs() < 1e-9);
    }

    #[test]
    fn non_unit_embeddings_are_rejected() {
        let bad = row(&[0.5, 0.0]);
        assert!(matches!(
            identity_losses(&bad, &unit2(0.0), &unit2(1.0), &LossConfig::default()),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn pose_loss_examples() {
        let cfg = LossConfig::default();
        let p0 = row(&[0.0, 0.0, 0.0]);
        let l = pose_losses(&p0, &row(&[1.0, 2.0, 2.0]), &p0, &cfg).unwrap();
        assert_eq!(scalar(&l.d_vary), 9.0);
        assert_eq!(scalar(&l.l_vary), -3.0);
        assert_eq!(scalar(&l.l_match), 0.0);
    }

    #[test]
    fn total_combines_the_four_terms() {
        let aux = AuxLosses {
            identity: IdentityLosses {
                l_pull: t(&[0.7]).squeeze(0).unwrap(),
                l_push: t(&[-1.4]).squeeze(0).unwrap(),
                theta_same: t(&[0.0]).squeeze(0).unwrap(),
                theta_diff: t(&[0.0]).squeeze(0).unwrap(),
            },
            pose: PoseLosses {
                l_vary: t(&[-3.0]).squeeze(0).unwrap(),
                l_match: t(&[0.0]).squeeze(0).unwrap(),
                d_vary: t(&[0.0]).squeeze(0).unwrap(),
                d_match: t(&[0.0]).squeeze(0).unwrap(),
            },
        };
        let g = t(&[1.0]).squeeze(0).unwrap();
        let total = total_generator_loss(&g, &aux, &LossConfig::default()).unwrap();
        assert!((scalar(&total) - 0.63).abs() < 1e-12);
        let off = LossConfig {
            lambda_aux: 0.0,
            ..Default::default()
        };
        assert_eq!(scalar(&total_generator_loss(&g, &aux, &off).unwrap()), 1.0);
        let r = aux.report(&LossConfig::default()).unwrap();
        assert!((r.total_aux + 0.37).abs() < 1e-12);
    }

    #[test]
    fn pull_gradient_vanishes_below_the_floor() {
        let cfg = LossConfig::default();
        let x = Var::new(&[[0.3f64.cos(), 0.3f64.sin()]], &Device::Cpu).unwrap();
        let e0 = unit2(0.0);
        let l = identity_losses(&e0, x.as_tensor(), &unit2(2.0), &cfg).unwrap();
        let g = l.l_pull.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap();
        assert_eq!(ops::abs_sum(gx).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau_pull: 2.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
