use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use autodiff::Tensor;

use super::config::{HoleFill, TrainConfig};
use super::trainer::{composite, masked_input, Trainer};
use crate::data::save_image;
use crate::error::{Error, Result};
use crate::masking::{build_mask_suite, Mask, MaskSource, MaskSuite};
use crate::metrics::{self, aggregate, Aggregate, MetricsRecord};
use crate::models::Arm;

/// Something that fills holes. `index` is the position of the image in the
/// evaluated list, which lets oracle surrogates look up the ground truth.
pub trait Inpainter {
    /// Raw fill `x̃` for one masked image `[1,C,H,W]`; only hole pixels are used.
    fn generate(&self, index: usize, x_mask: &Tensor, mask: &Mask) -> Result<Tensor>;
}

impl Inpainter for Trainer {
    fn generate(&self, _index: usize, x_mask: &Tensor, mask: &Mask) -> Result<Tensor> {
        Trainer::generate(self, x_mask, mask)
    }
}

/// Returns the ground truth: a perfect inpainter.
pub struct IdentitySurrogate<'a>(pub &'a [Tensor]);

impl Inpainter for IdentitySurrogate<'_> {
    fn generate(&self, index: usize, _x_mask: &Tensor, _mask: &Mask) -> Result<Tensor> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Mismatch(format!("no ground truth for image {index}")))
    }
}

/// Fills every hole with zeros.
pub struct ZeroFill;

impl Inpainter for ZeroFill {
    fn generate(&self, _index: usize, x_mask: &Tensor, _mask: &Mask) -> Result<Tensor> {
        Ok(Tensor::zeros(x_mask.shape()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<MetricsRecord>,
    pub aggregate: Aggregate,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        metrics::records_to_csv(&self.records)
    }
}

fn check_suite(images: &[Tensor], suite: &MaskSuite) -> Result<()> {
    if suite.len() < images.len() {
        return Err(Error::Mismatch(format!(
            "mask suite has {} masks for {} test images",
            suite.len(),
            images.len()
        )));
    }
    if let Some(img) = images.first() {
        let [_, _, h, w] = img.dims4()?;
        if (h, w) != (suite.height, suite.width) {
            return Err(Error::Mismatch(format!(
                "mask suite is {}x{}, images are {h}x{w}",
                suite.height, suite.width
            )));
        }
    }
    Ok(())
}

/// PSNR and SSIM of the composited output against the ground truth, image
/// `i` paired with mask `i` of the suite.
pub fn evaluate(
    inpainter: &dyn Inpainter,
    method: &str,
    checkpoint: &str,
    images: &[Tensor],
    suite: &MaskSuite,
    fill: HoleFill,
) -> Result<Evaluation> {
    check_suite(images, suite)?;
    let mut records = Vec::with_capacity(images.len());
    for (i, (x, mask)) in images.iter().zip(&suite.masks).enumerate() {
        let x_mask = masked_input(x, mask, fill)?;
        let generated = inpainter.generate(i, &x_mask, mask)?;
        let x_final = composite(&x_mask, &generated, mask)?;
        records.push(MetricsRecord {
            image_id: format!("{i}"),
            method: method.to_string(),
            coverage: metrics::coverage(mask),
            psnr_db: metrics::psnr(&x_final, x, 1.0)?,
            ssim: metrics::ssim(&x_final, x)?,
            checkpoint: checkpoint.to_string(),
        });
    }
    Ok(Evaluation {
        aggregate: aggregate(&records),
        records,
    })
}

/// Pixel ROC-AUC of the discriminator's logits at telling hole pixels from
/// observed ones, on images inpainted by the trainer's own generator.
pub fn segmentation_auc(trainer: &Trainer, images: &[Tensor], suite: &MaskSuite) -> Result<f64> {
    check_suite(images, suite)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (x, mask) in images.iter().zip(&suite.masks) {
        let x_final = trainer.inpaint(x, mask)?;
        let logits = trainer.logits(&x_final)?;
        scores.extend_from_slice(logits.data());
        labels.extend(mask.tensor().data().iter().map(|&v| v == 1.0));
    }
    metrics::roc_auc(&scores, &labels)
}

/// One line of a coverage sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub coverage: f64,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const SWEEP_HEADER: &str = "coverage,method,psnr_db,ssim";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            metrics::format_value(r.coverage),
            r.method,
            metrics::format_value(r.psnr_db),
            metrics::format_value(r.ssim)
        );
    }
    out
}

/// Inputs of [`sweep_coverage`].
pub struct SweepPlan<'a> {
    pub base: &'a TrainConfig,
    /// Observed fractions; each level trains with one fixed-size rectangle
    /// covering `1 - level` of the image.
    pub levels: &'a [f64],
    pub arms: &'a [Arm],
    pub train: &'a [Tensor],
    pub test: &'a [Tensor],
    pub suite_seed: u64,
}

/// Trains a fresh model per level and arm with `base.steps` steps, then
/// evaluates it on a fixed suite of same-size masks. `progress` receives each
/// row as it completes.
pub fn sweep_coverage(
    plan: &SweepPlan<'_>,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &level in plan.levels {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::Config(format!("coverage level {level} outside [0, 1]")));
        }
        let source = MaskSource::FixedRect {
            hole_fraction: 1.0 - level,
        };
        let size = plan.base.image_size;
        let suite = build_mask_suite(source, size, size, plan.suite_seed, plan.test.len())?;
        for &arm in plan.arms {
            let mut config = plan.base.clone();
            config.mask_source = source;
            config.arm = arm;
            let mut trainer = Trainer::new(config)?;
            trainer.run(plan.train, plan.base.steps, |_, _| Ok(()))?;
            let eval = evaluate(&trainer, &arm.to_string(), "", plan.test, &suite, plan.base.hole_fill)?;
            let row = SweepRow {
                coverage: level,
                method: arm.to_string(),
                psnr_db: eval.aggregate.psnr_db.mean,
                ssim: eval.aggregate.ssim.mean,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Writes `NNN_input.png` (masked input), `NNN_inpainted.png` and
/// `NNN_segmap.png` (sigmoid of the discriminator logits) per image.
pub fn dump_segmaps(
    trainer: &Trainer,
    images: &[Tensor],
    masks: &[Mask],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if trainer.config.arm != Arm::Saad {
        return Err(Error::Config(format!(
            "segmentation maps need a saad checkpoint, this one is `{}`",
            trainer.config.arm
        )));
    }
    if masks.len() < images.len() {
        return Err(Error::Mismatch(format!("{} masks for {} images", masks.len(), images.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (i, (x, mask)) in images.iter().zip(masks).enumerate() {
        let x_mask = masked_input(x, mask, trainer.config.hole_fill)?;
        let x_final = trainer.inpaint(x, mask)?;
        let seg = trainer.logits(&x_final)?.map(autodiff::sigmoid);
        for (name, t) in [("input", &x_mask), ("inpainted", &x_final), ("segmap", &seg)] {
            let path = out_dir.join(format!("{i:03}_{name}.png"));
            save_image(t, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
