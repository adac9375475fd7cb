use autodiff::{ConvGeom, Var};

use super::{receptive_field, Critic, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{init_params, BoundParams, ConvSpec, InitSpec, ParamStore};

/// Init gain of the aggregation filter.
pub const AGGREGATE_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SaadConfig {
    pub image_channels: usize,
    /// Output width of each residual block.
    pub channels: Vec<usize>,
    /// Stride of the first conv of each block.
    pub strides: Vec<usize>,
}

impl Default for SaadConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
        }
    }
}

impl SaadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "discriminator needs one stride per block and at least one block".into(),
            ));
        }
        if self.channels.iter().chain(&self.strides).any(|&v| v == 0) || self.image_channels == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }

    /// Total downsampling factor at the output of each block.
    pub fn level_factors(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }
}

/// Residual block: `lrelu(conv_b(lrelu(conv_a(x))) + shortcut(x))`, with a 1x1
/// projection shortcut when width or stride change.
#[derive(Debug, Clone)]
struct Block {
    conv_a: ConvSpec,
    conv_b: ConvSpec,
    shortcut: Option<ConvSpec>,
}

/// Segmentation discriminator: a residual backbone, a 1x1 real/fake head after
/// every block, head maps upsampled to input resolution, concatenated and fused
/// by a final 1x1 conv into a per-pixel logit map.
#[derive(Debug, Clone)]
pub struct Saad {
    config: SaadConfig,
    blocks: Vec<Block>,
    heads: Vec<ConvSpec>,
    aggregate: ConvSpec,
}

/// Output of [`Saad::forward`].
#[derive(Debug, Clone)]
pub struct SaadOutput<'t> {
    /// Pre-sigmoid logits at input resolution, `[N,1,H,W]`.
    pub logits: Var<'t>,
    /// Per-level head maps before upsampling.
    pub head_maps: Vec<Var<'t>>,
}

impl Saad {
    pub fn new(config: SaadConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = config.image_channels;
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for (i, (&cout, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let conv_a = ConvSpec::new(format!("disc.block{i}.a"), cin, cout, 3, ConvGeom::new(stride, 1, 1));
            let conv_b = ConvSpec::new(format!("disc.block{i}.b"), cout, cout, 3, ConvGeom::same(3, 1));
            let shortcut = (cin != cout || stride != 1).then(|| {
                ConvSpec::new(format!("disc.block{i}.skip"), cin, cout, 1, ConvGeom::new(stride, 0, 1))
            });
            blocks.push(Block {
                conv_a,
                conv_b,
                shortcut,
            });
            heads.push(ConvSpec::new(format!("disc.head{i}"), cout, 1, 1, ConvGeom::new(1, 0, 1)));
            cin = cout;
        }
        // small so that an untrained critic starts near p = 0.5 everywhere
        let aggregate =
            ConvSpec::new("disc.aggregate", heads.len(), 1, 1, ConvGeom::new(1, 0, 1)).with_init_gain(AGGREGATE_INIT_GAIN);
        Ok(Self {
            config,
            blocks,
            heads,
            aggregate,
        })
    }

    pub fn config(&self) -> &SaadConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.conv_a.clone());
            out.push(b.conv_b.clone());
            out.extend(b.shortcut.clone());
        }
        out.extend(self.heads.iter().cloned());
        out.push(self.aggregate.clone());
        out
    }

    pub fn init(&self, spec: InitSpec) -> Result<ParamStore> {
        init_params(&self.layers(), spec)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(ConvSpec::num_params).sum()
    }

    /// Receptive field of each head, in input pixels.
    pub fn head_receptive_fields(&self) -> Vec<usize> {
        let mut chain = Vec::new();
        self.blocks
            .iter()
            .map(|b| {
                chain.push((3, b.conv_a.geom.stride, 1));
                chain.push((3, 1, 1));
                receptive_field(&chain)
            })
            .collect()
    }

    pub fn bind<'a, 't, 's>(&'a self, params: &'a BoundParams<'t, 's>) -> BoundSaad<'a, 't, 's> {
        BoundSaad { net: self, params }
    }

    pub fn forward<'t>(&self, params: &BoundParams<'t, '_>, x: Var<'t>) -> Result<SaadOutput<'t>> {
        let shape = x.shape();
        let factors = self.config.level_factors();
        let total = *factors.last().expect("validated non-empty");
        if shape.len() != 4 || shape[1] != self.config.image_channels {
            return Err(Error::Mismatch(format!(
                "discriminator expects [N,{},H,W], got {shape:?}",
                self.config.image_channels
            )));
        }
        if !shape[2].is_multiple_of(total) || !shape[3].is_multiple_of(total) {
            return Err(Error::Mismatch(format!(
                "input {}x{} is not divisible by the discriminator stride {total}",
                shape[2], shape[3]
            )));
        }
        let tape = x.tape();
        let mut h = x;
        let mut head_maps = Vec::with_capacity(self.blocks.len());
        let mut upsampled = Vec::with_capacity(self.blocks.len());
        for ((block, head), &factor) in self.blocks.iter().zip(&self.heads).zip(&factors) {
            let a = block.conv_a.forward(params, h)?.leaky_relu(LEAKY_SLOPE)?;
            let b = block.conv_b.forward(params, a)?;
            let skip = match &block.shortcut {
                Some(conv) => conv.forward(params, h)?,
                None => h,
            };
            h = b.add(skip)?.leaky_relu(LEAKY_SLOPE)?;
            let map = head.forward(params, h)?;
            head_maps.push(map);
            upsampled.push(map.upsample_nearest(factor)?);
        }
        let stacked = tape.concat_channels(&upsampled)?;
        let logits = self.aggregate.forward(params, stacked)?;
        Ok(SaadOutput { logits, head_maps })
    }
}

/// A [`Saad`] paired with parameters on a tape, usable as a [`Critic`].
pub struct BoundSaad<'a, 't, 's> {
    net: &'a Saad,
    params: &'a BoundParams<'t, 's>,
}

impl<'t> Critic<'t> for BoundSaad<'_, 't, '_> {
    fn logit_map(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.net.forward(self.params, x)?.logits)
    }
}

impl<'t> BoundSaad<'_, 't, '_> {
    pub fn forward(&self, x: Var<'t>) -> Result<SaadOutput<'t>> {
        self.net.forward(self.params, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autodiff::{Tape, Tensor};

    #[test]
    fn output_shapes() {
        let d = Saad::new(SaadConfig::default()).unwrap();
        let params = d.init(InitSpec { seed: 3 }).unwrap();
        for size in [32, 64, 128] {
            let tape = Tape::new();
            let x = tape.constant(Tensor::full(&[1, 3, size, size], 0.5));
            let out = d.forward(&params.bind(&tape, false), x).unwrap();
            assert_eq!(out.logits.shape(), vec![1, 1, size, size]);
            let sides: Vec<usize> = out.head_maps.iter().map(|m| m.shape()[2]).collect();
            assert_eq!(sides, vec![size, size / 2, size / 4]);
        }
    }

    #[test]
    fn heads_are_patch_classifiers() {
        let d = Saad::new(SaadConfig::default()).unwrap();
        let fields = d.head_receptive_fields();
        assert_eq!(fields, vec![5, 11, 23]);
        assert!(fields.iter().all(|&s| s > 1));
    }

    #[test]
    fn param_count_matches_formula() {
        let d = Saad::new(SaadConfig::default()).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let expected = conv(3, 16, 3) + conv(16, 16, 3) + conv(3, 16, 1)
            + conv(16, 32, 3) + conv(32, 32, 3) + conv(16, 32, 1)
            + conv(32, 64, 3) + conv(64, 64, 3) + conv(32, 64, 1)
            + conv(16, 1, 1) + conv(32, 1, 1) + conv(64, 1, 1)
            + conv(3, 1, 1);
        assert_eq!(d.num_params(), expected);
    }

    #[test]
    fn rejects_wrong_channels() {
        let d = Saad::new(SaadConfig::default()).unwrap();
        let params = d.init(InitSpec { seed: 3 }).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert!(d.forward(&params.bind(&tape, false), x).is_err());
    }
}
