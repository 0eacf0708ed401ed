//! Training objectives, expressed on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Real, Rng, Tensor, Var};
use crate::scheduler::FidelityWeight;

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Perceptual term weight.
    pub lambda1: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// R1 regularization weight.
    pub lambda2: f64,
    /// Variance of the R1 perturbation.
    pub r1_variance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda_min: 0.02,
            lambda_max: 0.1,
            lambda2: 5.0,
            r1_variance: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            contract!(
                "need 0 < lambda_min <= lambda_max, got {} and {}",
                self.lambda_min,
                self.lambda_max
            );
        }
        if !(self.r1_variance > 0.0) || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            contract!("loss weights must be non-negative and the R1 variance positive");
        }
        Ok(())
    }
}

pub fn flow_matching_loss<'t, T: Real>(v_pred: Var<'t, T>, v_target: Var<'t, T>) -> Result<Var<'t, T>> {
    v_pred.mse(v_target)
}

/// Mean squared distance between matching feature maps, averaged over maps.
pub fn feature_distance<'t, T: Real>(a: &[Var<'t, T>], b: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if a.len() != b.len() || a.is_empty() {
        contract!("feature lists differ in length ({} vs {})", a.len(), b.len());
    }
    let mut acc = a[0].mse(b[0])?;
    for (x, y) in a.iter().zip(b).skip(1) {
        acc = acc.add(x.mse(*y)?)?;
    }
    Ok(acc.scale(1.0 / a.len() as f64))
}

/// `MSE(pred, gt) + lambda1 * feature_distance(phi(pred), phi(gt))`; the
/// perceptual term is skipped when `lambda1 == 0`.
pub fn rec_loss<'t, T: Real, F>(pred: Var<'t, T>, gt: Var<'t, T>, lambda1: f64, perceptual: F) -> Result<Var<'t, T>>
where
    F: Fn(Var<'t, T>) -> Result<Vec<Var<'t, T>>>,
{
    let m = pred.mse(gt)?;
    if lambda1 == 0.0 {
        return Ok(m);
    }
    let p = feature_distance(&perceptual(pred)?, &perceptual(gt)?)?;
    m.add(p.scale(lambda1))
}

fn check_scores<T: Real>(a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    let (va, vb) = (a.value(), b.value());
    if va.shape() != vb.shape() {
        contract!("score grids differ: {:?} vs {:?}", va.shape(), vb.shape());
    }
    if !va.all_finite() || !vb.all_finite() {
        return Err(Error::NonFinite {
            op: "adversarial loss".into(),
            detail: "discriminator scores are not finite".into(),
        });
    }
    Ok(())
}

/// `sigmoid(a - b)` elementwise.
pub fn relativistic<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(a.sub(b)?.sigmoid())
}

fn log_terms<'t, T: Real>(t1: Var<'t, T>, t2: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(t1
        .log_clamped(LOG_FLOOR)
        .add(t2.log_clamped(LOG_FLOOR))?
        .scale(-0.5)
        .mean())
}

/// Generator side: mean over patches of
/// `0.5 * (-log(1 - R(real, fake)) - log R(fake, real))`.
pub fn adv_g_loss<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_scores(d_real, d_fake)?;
    let one_minus = relativistic(d_real, d_fake)?.neg().add_scalar(1.0);
    log_terms(one_minus, relativistic(d_fake, d_real)?)
}

/// Discriminator side: mean over patches of
/// `0.5 * (-log R(real, fake) - log(1 - R(fake, real)))`.
pub fn adv_d_loss<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    check_scores(d_real, d_fake)?;
    let one_minus = relativistic(d_fake, d_real)?.neg().add_scalar(1.0);
    log_terms(one_minus, relativistic(d_real, d_fake)?)
}

/// `f * lambda_min + (1 - f) * lambda_max`.
pub fn faa_weight(f: FidelityWeight, lambda_min: f64, lambda_max: f64) -> f64 {
    let f = f.value();
    f * lambda_min + (1.0 - f) * lambda_max
}

/// Gaussian perturbation with the given variance, same shape as `like`.
pub fn r1_perturbation<T: Real>(like: &Tensor<T>, variance: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(like.shape(), variance.sqrt(), rng)
}

/// Mean over patches of the squared change in scores.
pub fn r1_penalty<'t, T: Real>(s_real: Var<'t, T>, s_perturbed: Var<'t, T>) -> Result<Var<'t, T>> {
    s_perturbed.mse(s_real)
}

/// Scores `x_real` and `x_real + delta` with `score` and penalizes the change.
pub fn r1_reg<'t, T: Real, F>(score: F, x_real: Var<'t, T>, delta: &Tensor<T>) -> Result<Var<'t, T>>
where
    F: Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = x_real.tape();
    let pert = x_real.add(tape.constant(delta))?;
    r1_penalty(score(x_real)?, score(pert)?)
}

pub fn total_g_loss<'t, T: Real>(
    rec: Var<'t, T>,
    adv_g: Var<'t, T>,
    f: FidelityWeight,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    rec.add(adv_g.scale(faa_weight(f, w.lambda_min, w.lambda_max)))
}

pub fn total_d_loss<'t, T: Real>(adv_d: Var<'t, T>, reg: Var<'t, T>, lambda2: f64) -> Result<Var<'t, T>> {
    adv_d.add(reg.scale(lambda2))
}
