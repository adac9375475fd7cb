//! The inpainting generator, the segmentation discriminator and the scalar
//! scoring heads used by the ablation arms.

mod generator;
mod saad;

use std::fmt;
use std::str::FromStr;

use autodiff::{Tape, Var};

use crate::error::{Error, Result};
use crate::masking::Mask;

pub use generator::{Generator, GeneratorConfig};
pub use saad::{BoundSaad, Saad, SaadConfig, SaadOutput};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// A discriminator seen as a map from images to a logit map `[N,1,h,w]`.
pub trait Critic<'t> {
    fn logit_map(&self, x: Var<'t>) -> Result<Var<'t>>;
}

impl<'t, F> Critic<'t> for F
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    fn logit_map(&self, x: Var<'t>) -> Result<Var<'t>> {
        self(x)
    }
}

/// Which supervision the discriminator receives. All arms share the backbone;
/// only the way its logit map is scored differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Per-pixel segmentation against the hole mask.
    Saad,
    /// Mean of per-pixel probabilities, classified per image.
    PatchMean,
    /// Spatial mean of logits, classified per image.
    Global,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Saad, Arm::PatchMean, Arm::Global];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Saad => "saad",
            Arm::PatchMean => "patch_mean",
            Arm::Global => "global",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "saad" => Ok(Arm::Saad),
            "patch_mean" => Ok(Arm::PatchMean),
            "global" => Ok(Arm::Global),
            other => Err(Error::Config(format!(
                "unknown discriminator arm `{other}` (expected saad, patch_mean or global)"
            ))),
        }
    }
}

/// Spatial mean of the logit map, one logit per image: `[N]`.
pub fn global_score<'t>(logit_map: Var<'t>) -> Result<Var<'t>> {
    Ok(logit_map.mean_per_sample()?)
}

/// Mean per-pixel probability, one per image: `[N]`.
pub fn patch_mean_score<'t>(logit_map: Var<'t>) -> Result<Var<'t>> {
    Ok(logit_map.sigmoid()?.mean_per_sample()?)
}

/// `x_mask ⊙ (1 - M) + x̃ ⊙ M`; with zero-filled holes this is
/// `x_mask + x̃ ⊙ M`. Observed pixels come out bitwise equal to `x_mask`.
pub fn compose_output<'t>(x_mask: Var<'t>, generated: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let tape: &'t Tape = x_mask.tape();
    let c = x_mask.shape()[1];
    let holes = mask.expanded(c)?;
    let observed = holes.map(|v| 1.0 - v);
    let keep = x_mask.mul(tape.constant(observed))?;
    let fill = generated.mul(tape.constant(holes))?;
    Ok(keep.add(fill)?)
}

/// Receptive field (in input pixels) after a chain of `(kernel, stride, dilation)` convs.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> usize {
    let (mut field, mut jump) = (1, 1);
    for &(k, s, d) in layers {
        field += d * (k - 1) * jump;
        jump *= s;
    }
    field
}

pub(crate) fn mask_var<'t>(tape: &'t Tape, mask: &Mask) -> Var<'t> {
    tape.constant(mask.tensor().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::Tensor;

    #[test]
    fn score_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::full(&[2, 1, 4, 4], 1.25));
        assert_eq!(global_score(z).unwrap().value().data(), &[1.25, 1.25]);

        let half = Tensor::from_fn(&[1, 1, 4, 4], |i| if i < 8 { 3.0 } else { -3.0 });
        assert_eq!(global_score(tape.constant(half)).unwrap().item(), 0.0);

        let zero = tape.constant(Tensor::zeros(&[3, 1, 2, 2]));
        assert_eq!(patch_mean_score(zero).unwrap().value().data(), &[0.5; 3]);
    }

    #[test]
    fn compose_selects_per_pixel() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 / 32.0);
        let mask = Mask::new(Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64)).unwrap();
        let xm = crate::masking::apply_mask(&x, &mask, 0.0).unwrap();
        let gen = Tensor::from_fn(&[1, 2, 4, 4], |i| 1.0 - i as f64 / 64.0);
        let out = compose_output(tape.constant(xm.clone()), tape.constant(gen.clone()), &mask)
            .unwrap()
            .value();
        for c in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let want = if mask.is_hole(0, y, xx) { gen.at4(0, c, y, xx) } else { xm.at4(0, c, y, xx) };
                    assert_eq!(out.at4(0, c, y, xx).to_bits(), want.to_bits());
                }
            }
        }
        let none = compose_output(tape.constant(xm.clone()), tape.constant(gen), &Mask::zeros(1, 4, 4)).unwrap();
        assert!(none.value().bitwise_eq(&xm));
    }

    #[test]
    fn arm_names_roundtrip() {
        for arm in Arm::ALL {
            assert_eq!(arm.to_string().parse::<Arm>().unwrap(), arm);
        }
        assert!("patchgan".parse::<Arm>().is_err());
    }

    #[test]
    fn receptive_field_of_stacked_convs() {
        assert_eq!(receptive_field(&[(3, 1, 1), (3, 1, 1)]), 5);
        assert_eq!(receptive_field(&[(3, 1, 2)]), 5);
        assert_eq!(receptive_field(&[(3, 2, 1), (3, 1, 1)]), 7);
    }
}
