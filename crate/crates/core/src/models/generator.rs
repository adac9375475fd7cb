use autodiff::{ConvGeom, Var};

use super::{mask_var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::nn::{init_params, BoundParams, ConvSpec, InitSpec, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    /// Feed the hole mask as an extra input channel.
    pub mask_channel: bool,
    pub base_channels: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    /// One dilated 3x3 conv per entry, at the bottleneck.
    pub dilations: Vec<usize>,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            mask_channel: true,
            base_channels: 16,
            depth: 3,
            dilations: vec![2, 4],
            image_size: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn input_channels(&self) -> usize {
        self.image_channels + self.mask_channel as usize
    }

    pub fn validate(&self) -> Result<()> {
        let step = 1usize << self.depth;
        if self.image_size == 0 || !self.image_size.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "generator image size {} is not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.image_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(())
    }
}

/// U-Net: a full-resolution stem, `depth` stride-2 downsampling convs that
/// double the width, dilated convs at the bottleneck, then per level a
/// nearest x2 upsample, concatenation with the matching encoder feature map
/// and a 3x3 conv. A final 3x3 conv and sigmoid produce the image.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    stem: ConvSpec,
    down: Vec<ConvSpec>,
    middle: Vec<ConvSpec>,
    up: Vec<ConvSpec>,
    out: ConvSpec,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let width = |level: usize| b << level;
        let stem = ConvSpec::new("gen.stem", config.input_channels(), b, 3, ConvGeom::same(3, 1));
        let down = (1..=config.depth)
            .map(|i| {
                ConvSpec::new(
                    format!("gen.down{i}"),
                    width(i - 1),
                    width(i),
                    3,
                    ConvGeom::new(2, 1, 1),
                )
            })
            .collect();
        let bottom = width(config.depth);
        let middle = config
            .dilations
            .iter()
            .enumerate()
            .map(|(j, &d)| ConvSpec::new(format!("gen.mid{j}"), bottom, bottom, 3, ConvGeom::same(3, d)))
            .collect();
        let up = (0..config.depth)
            .rev()
            .map(|i| {
                ConvSpec::new(
                    format!("gen.up{i}"),
                    width(i + 1) + width(i),
                    width(i),
                    3,
                    ConvGeom::same(3, 1),
                )
            })
            .collect();
        let out = ConvSpec::new("gen.out", b, config.image_channels, 3, ConvGeom::same(3, 1));
        Ok(Self {
            config,
            stem,
            down,
            middle,
            up,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<ConvSpec> {
        std::iter::once(&self.stem)
            .chain(&self.down)
            .chain(&self.middle)
            .chain(&self.up)
            .chain(std::iter::once(&self.out))
            .cloned()
            .collect()
    }

    pub fn init(&self, spec: InitSpec) -> Result<ParamStore> {
        init_params(&self.layers(), spec)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(ConvSpec::num_params).sum()
    }

    /// Raw generator output `x̃` in (0, 1), same shape as `x_mask`.
    pub fn forward<'t>(
        &self,
        params: &BoundParams<'t, '_>,
        x_mask: Var<'t>,
        mask: &Mask,
    ) -> Result<Var<'t>> {
        let shape = x_mask.shape();
        let tape = x_mask.tape();
        if shape.len() != 4 || shape[1] != self.config.image_channels {
            return Err(Error::Mismatch(format!(
                "generator expects [N,{},H,W], got {shape:?}",
                self.config.image_channels
            )));
        }
        let step = 1usize << self.config.depth;
        if !shape[2].is_multiple_of(step) || !shape[3].is_multiple_of(step) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{}",
                shape[2], shape[3], self.config.depth
            )));
        }
        let input = if self.config.mask_channel {
            tape.concat_channels(&[x_mask, mask_var(tape, mask)])?
        } else {
            x_mask
        };

        let act = |v: Var<'t>| -> Result<Var<'t>> { Ok(v.leaky_relu(LEAKY_SLOPE)?) };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = act(self.stem.forward(params, input)?)?;
        for conv in &self.down {
            skips.push(h);
            h = act(conv.forward(params, h)?)?;
        }
        for conv in &self.middle {
            h = act(conv.forward(params, h)?)?;
        }
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let merged = tape.concat_channels(&[h.upsample_nearest(2)?, skip])?;
            h = act(conv.forward(params, merged)?)?;
        }
        Ok(self.out.forward(params, h)?.sigmoid()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::{Tape, Tensor};

    #[test]
    fn param_count_matches_formula() {
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let b = 16;
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let expected = conv(4, b)
            + conv(b, 2 * b)
            + conv(2 * b, 4 * b)
            + conv(4 * b, 8 * b)
            + 2 * conv(8 * b, 8 * b)
            + conv(8 * b + 4 * b, 4 * b)
            + conv(4 * b + 2 * b, 2 * b)
            + conv(2 * b + b, b)
            + conv(b, 3);
        assert_eq!(g.num_params(), expected);
        assert_eq!(g.init(InitSpec { seed: 1 }).unwrap().num_scalars(), expected);
    }

    #[test]
    fn shapes_and_zero_params() {
        let g = Generator::new(GeneratorConfig {
            base_channels: 4,
            ..Default::default()
        })
        .unwrap();
        let mut params = g.init(InitSpec { seed: 0 }).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 64, 64], 0.3));
        let m = Mask::zeros(2, 64, 64);
        let y = g.forward(&params.bind(&tape, false), x, &m).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 64, 64]);
        assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));

        for p in params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let y = g.forward(&params.bind(&tape, false), x, &m).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_indivisible_sizes() {
        assert!(Generator::new(GeneratorConfig {
            image_size: 60,
            ..Default::default()
        })
        .is_err());
        let g = Generator::new(GeneratorConfig::default()).unwrap();
        let params = g.init(InitSpec { seed: 0 }).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 20, 20]));
        assert!(g.forward(&params.bind(&tape, false), x, &Mask::zeros(1, 20, 20)).is_err());
    }
}
