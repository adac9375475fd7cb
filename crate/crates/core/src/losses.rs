//! Training objectives for both networks.

use autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::models::{global_score, patch_mean_score, Arm, Critic};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_adv: f64,
    /// R1 coefficient.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_adv: 0.1,
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_r) && ok(self.lambda_adv) && ok(self.gamma)) || self.lambda_r == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative with lambda_r > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean squared error over hole pixels (every channel counts). An empty mask
/// gives 0 with the `empty_mask` flag set.
pub fn masked_mse<'t>(x: Var<'t>, x_final: Var<'t>, mask: &Mask) -> Result<autodiff::MaskedMean<'t>> {
    Ok(x_final.sub(x)?.square()?.masked_mean(mask.tensor())?)
}

/// `mean(softplus(z) - t·z)`, the logit form of binary cross-entropy.
pub fn bce_with_logits<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let sp = logits.softplus()?;
    let per_elem = if target.data().iter().all(|&t| t == 0.0) {
        sp
    } else {
        let t = logits.tape().constant(autodiff::expand_mask(target, &logits.shape())?);
        sp.sub(logits.mul(t)?)?
    };
    Ok(per_elem.mean()?)
}

/// Per-pixel BCE of a logit map against a mask (1 = fake).
pub fn seg_bce<'t>(logit_map: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let (ls, ms) = (logit_map.shape(), mask.tensor().shape());
    if ls.len() != 4 || ls[1] != 1 || ls[0] != ms[0] || ls[2..] != ms[2..] {
        return Err(Error::Mismatch(format!(
            "logit map {ls:?} does not match mask {ms:?}"
        )));
    }
    bce_with_logits(logit_map, mask.tensor())
}

/// Batch-mean BCE of probabilities `p: [N]` against a single label.
pub fn bce_prob<'t>(p: Var<'t>, label: f64) -> Result<Var<'t>> {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP)?;
    let mut total: Option<Var<'t>> = None;
    if label != 0.0 {
        total = Some(p.ln()?.scale(-label)?);
    }
    if label != 1.0 {
        let neg = p.rsub_scalar(1.0)?.ln()?.scale(label - 1.0)?;
        total = Some(match total {
            Some(t) => t.add(neg)?,
            None => neg,
        });
    }
    Ok(total.expect("label produces at least one term").mean()?)
}

/// What the critic should predict for an input.
#[derive(Debug, Clone, Copy)]
pub enum Target<'m> {
    /// Entirely real.
    Real,
    /// Composited fake; `mask` marks generated pixels.
    Fake(&'m Mask),
}

/// Critic loss of a logit map under an arm's supervision. SAAD segments
/// against the mask (all zeros for real images); the scalar arms classify the
/// whole image as real (0) or fake (1).
pub fn arm_loss<'t>(arm: Arm, logit_map: Var<'t>, target: Target<'_>) -> Result<Var<'t>> {
    let label = match target {
        Target::Real => 0.0,
        Target::Fake(_) => 1.0,
    };
    match arm {
        Arm::Saad => match target {
            Target::Fake(mask) => seg_bce(logit_map, mask),
            Target::Real => {
                let [n, _, h, w] = as4(&logit_map.shape())?;
                seg_bce(logit_map, &Mask::zeros(n, h, w))
            }
        },
        Arm::Global => {
            let s = global_score(logit_map)?;
            bce_with_logits(s, &Tensor::full(&s.shape(), label))
        }
        Arm::PatchMean => bce_prob(patch_mean_score(logit_map)?, label),
    }
}

fn as4(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::Mismatch(format!("expected a 4-d logit map, got {shape:?}")))
}

/// Zero-centered gradient penalty on real data:
/// `(γ/2) · mean_n ‖∇_x mean_{h,w} D(x)_n‖²`. `x_real` must be a leaf that
/// requires gradients; `logit_map` must be `D(x_real)`.
pub fn r1_penalty<'t>(x_real: Var<'t>, logit_map: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    let tape = x_real.tape();
    if gamma == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    if !x_real.requires_grad() {
        return Err(Error::Mismatch("R1 penalty needs a real input that tracks gradients".into()));
    }
    let [n, _, h, w] = as4(&logit_map.shape())?;
    // Images are independent, so the gradient of the summed per-image means
    // holds each image's own gradient.
    let s = logit_map.sum()?.div_scalar((h * w) as f64)?;
    let g = tape.grad(s, &[x_real])?[0];
    Ok(g.square()?.sum()?.scale(gamma / (2.0 * n as f64))?)
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorLoss<'t> {
    pub total: Var<'t>,
    pub fake: Var<'t>,
    pub real: Var<'t>,
    pub r1: Var<'t>,
}

/// Critic loss on a detached composite and a real batch, plus R1 on the real
/// batch (skipped when `γ = 0`).
pub fn discriminator_loss<'t, C: Critic<'t>>(
    tape: &'t Tape,
    critic: &C,
    arm: Arm,
    x_real: &Tensor,
    x_fake: Var<'t>,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<DiscriminatorLoss<'t>> {
    let fake = arm_loss(arm, critic.logit_map(x_fake.detach())?, Target::Fake(mask))?;
    let real_in = if weights.gamma > 0.0 {
        tape.leaf(x_real.clone())
    } else {
        tape.constant(x_real.clone())
    };
    let real_logits = critic.logit_map(real_in)?;
    let real = arm_loss(arm, real_logits, Target::Real)?;
    let r1 = r1_penalty(real_in, real_logits, weights.gamma)?;
    let total = fake.add(real)?.add(r1)?;
    Ok(DiscriminatorLoss {
        total,
        fake,
        real,
        r1,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss<'t> {
    pub total: Var<'t>,
    pub reconstruction: Var<'t>,
    /// Zero (and not evaluated) when `λ_adv = 0`.
    pub adversarial: Var<'t>,
    pub empty_mask: bool,
}

/// `λ_r·masked_mse + λ_adv·critic_loss(D(x̃_final), real)`. With
/// `adv_masked_only`, the SAAD term only averages over hole pixels.
pub fn generator_loss<'t, C: Critic<'t>>(
    critic: &C,
    arm: Arm,
    x: Var<'t>,
    x_final: Var<'t>,
    mask: &Mask,
    weights: &LossWeights,
    adv_masked_only: bool,
) -> Result<GeneratorLoss<'t>> {
    let tape = x.tape();
    let rec = masked_mse(x, x_final, mask)?;
    let reconstruction = rec.value;
    let mut total = reconstruction.scale(weights.lambda_r)?;
    let adversarial = if weights.lambda_adv > 0.0 {
        let logits = critic.logit_map(x_final)?;
        let adv = if adv_masked_only && arm == Arm::Saad {
            logits.softplus()?.masked_mean(mask.tensor())?.value
        } else {
            arm_loss(arm, logits, Target::Real)?
        };
        total = total.add(adv.scale(weights.lambda_adv)?)?;
        adv
    } else {
        tape.scalar(0.0)
    };
    Ok(GeneratorLoss {
        total,
        reconstruction,
        adversarial,
        empty_mask: rec.empty_mask,
    })
}
