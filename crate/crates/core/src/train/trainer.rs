use autodiff::{AutodiffError, Tape, Tensor};
use rand::Rng as _;

use super::config::{HoleFill, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss};
use crate::masking::{apply_mask, apply_mask_mean_fill, Mask};
use crate::models::{compose_output, Generator, Saad};
use crate::nn::{adam_step, AdamState, InitSpec, ParamStore};
use crate::seed::{derive_seed, rng_for, Rng, Stream};

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub l_r: f64,
    pub l_s_fake: f64,
    pub l_s_real: f64,
    pub r1: f64,
    pub l_adv: f64,
}

impl StepLosses {
    pub const HEADER: &'static str = "step,L_r,L_s_fake,L_s_real,R1,L_adv";

    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_r, self.l_s_fake, self.l_s_real, self.r1, self.l_adv
        )
    }
}

/// Both networks, their optimizers, the step counter and the training stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub saad: Saad,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub gen_adam: AdamState,
    pub disc_adam: AdamState,
    pub step: u64,
    pub(crate) rng: Rng,
}

/// Holes filled according to `fill`.
pub fn masked_input(x: &Tensor, mask: &Mask, fill: HoleFill) -> Result<Tensor> {
    match fill {
        HoleFill::Zero => apply_mask(x, mask, 0.0),
        HoleFill::Mean => apply_mask_mean_fill(x, mask),
    }
}

/// Tensor version of compositing: generated values inside holes, `x_mask` elsewhere.
pub fn composite(x_mask: &Tensor, generated: &Tensor, mask: &Mask) -> Result<Tensor> {
    let [_, c, _, _] = x_mask.dims4()?;
    let m = mask.expanded(c)?;
    let mut out = x_mask.clone();
    for ((o, g), h) in out.data_mut().iter_mut().zip(generated.data()).zip(m.data()) {
        if *h == 1.0 {
            *o = *g;
        }
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config())?;
        let saad = Saad::new(config.saad_config())?;
        let gen_params = generator.init(InitSpec {
            seed: derive_seed(config.seed, Stream::Init, 1),
        })?;
        let disc_params = saad.init(InitSpec {
            seed: derive_seed(config.seed, Stream::Init, 2),
        })?;
        Ok(Self {
            gen_adam: AdamState::new(&gen_params),
            disc_adam: AdamState::new(&disc_params),
            rng: rng_for(config.seed, Stream::Training, 0),
            config,
            generator,
            saad,
            gen_params,
            disc_params,
            step: 0,
        })
    }

    /// Draws `batch_size` images uniformly with replacement.
    pub fn sample_batch(&mut self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let picks: Vec<Tensor> = (0..self.config.batch_size)
            .map(|_| images[self.rng.gen_range(0..images.len())].clone())
            .collect();
        Ok(Tensor::stack(&picks)?)
    }

    pub fn sample_masks(&mut self, n: usize) -> Result<Mask> {
        let s = self.config.image_size;
        let masks = (0..n)
            .map(|_| self.config.mask_source.sample(s, s, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        Mask::stack(&masks)
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<StepLosses> {
        let step = self.step + 1;
        if batch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Mismatch("training batch has values outside [0, 1]".into()));
        }
        let [n, _, _, _] = batch.dims4()?;
        let mask = self.sample_masks(n)?;
        let x_mask = masked_input(batch, &mask, self.config.hole_fill)?;
        self.update(step, batch, &x_mask, &mask).map_err(|e| match e {
            Error::Autodiff(AutodiffError::NonFinite(op)) => Error::NonFiniteLoss {
                step,
                detail: format!(
                    "`{op}` produced a non-finite value; batch mean {:.6}, hole fraction {:.4}, lr_gen {}, lr_disc {}",
                    batch.mean(),
                    mask.hole_fraction(),
                    self.config.lr_gen,
                    self.config.lr_disc
                ),
            },
            other => other,
        })
    }

    fn update(&mut self, step: u64, batch: &Tensor, x_mask: &Tensor, mask: &Mask) -> Result<StepLosses> {
        let cfg = &self.config;
        let tape = Tape::new();
        let x = tape.constant(batch.clone());
        let xm = tape.constant(x_mask.clone());

        let gen_bound = self.gen_params.bind(&tape, true);
        let generated = self.generator.forward(&gen_bound, xm, mask)?;
        let x_final = compose_output(xm, generated, mask)?;
        let gen_vars = gen_bound.vars().to_vec();

        // Discriminator update on the detached composite.
        let d_bound = self.disc_params.bind(&tape, true);
        let critic = self.saad.bind(&d_bound);
        let d_loss = discriminator_loss(&tape, &critic, cfg.arm, batch, x_final, mask, &cfg.weights)?;
        let losses_d = (d_loss.fake.item(), d_loss.real.item(), d_loss.r1.item());
        let d_grads = tape.backward(d_loss.total)?;
        let d_vars = d_bound.vars().to_vec();
        let gen_before = cfg.check_isolation.then(|| self.gen_params.clone());
        self.disc_params.accumulate_grads(&d_vars, &d_grads)?;
        drop(d_grads);
        adam_step(&mut self.disc_params, &mut self.disc_adam, cfg.lr_disc)?;
        if let Some(before) = gen_before {
            if !before.bitwise_eq(&self.gen_params) {
                return Err(Error::Mismatch(format!("discriminator update modified the generator at step {step}")));
            }
        }

        // Generator update through the updated, frozen discriminator.
        let d_frozen = self.disc_params.bind(&tape, false);
        let critic = self.saad.bind(&d_frozen);
        let g_loss = generator_loss(
            &critic,
            cfg.arm,
            x,
            x_final,
            mask,
            &cfg.weights,
            cfg.adv_masked_only,
        )?;
        let g_grads = tape.backward(g_loss.total)?;
        let disc_before = cfg.check_isolation.then(|| self.disc_params.clone());
        self.gen_params.accumulate_grads(&gen_vars, &g_grads)?;
        adam_step(&mut self.gen_params, &mut self.gen_adam, cfg.lr_gen)?;
        if let Some(before) = disc_before {
            if !before.bitwise_eq(&self.disc_params) {
                return Err(Error::Mismatch(format!("generator update modified the discriminator at step {step}")));
            }
        }

        self.step = step;
        Ok(StepLosses {
            step,
            l_r: g_loss.reconstruction.item(),
            l_s_fake: losses_d.0,
            l_s_real: losses_d.1,
            r1: losses_d.2,
            l_adv: g_loss.adversarial.item(),
        })
    }

    /// Trains until `self.step == until`, sampling batches from `images`.
    /// `on_step` sees the trainer after each step.
    pub fn run(
        &mut self,
        images: &[Tensor],
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepLosses) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let batch = self.sample_batch(images)?;
            let losses = self.train_step(&batch)?;
            on_step(self, &losses)?;
        }
        Ok(())
    }

    /// Generator output `x̃` for a masked batch, without gradients.
    pub fn generate(&self, x_mask: &Tensor, mask: &Mask) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.gen_params.bind(&tape, false);
        let out = self.generator.forward(&bound, tape.constant(x_mask.clone()), mask)?;
        Ok(out.value().as_ref().clone())
    }

    /// Composited inpainting of `x` under `mask`.
    pub fn inpaint(&self, x: &Tensor, mask: &Mask) -> Result<Tensor> {
        let x_mask = masked_input(x, mask, self.config.hole_fill)?;
        let generated = self.generate(&x_mask, mask)?;
        composite(&x_mask, &generated, mask)
    }

    /// Discriminator logit map `[N,1,H,W]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.disc_params.bind(&tape, false);
        let out = self.saad.forward(&bound, tape.constant(x.clone()))?;
        Ok(out.logits.value().as_ref().clone())
    }
}
