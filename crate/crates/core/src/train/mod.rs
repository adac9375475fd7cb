//! Adversarial training, checkpoints, evaluation and coverage sweeps.

mod checkpoint;
mod config;
mod eval;
mod trainer;

pub use checkpoint::{checkpoint_hash, Checkpoint};
pub use config::{HoleFill, TrainConfig};
pub use eval::{
    dump_segmaps, evaluate, segmentation_auc, sweep_coverage, sweep_to_csv, Evaluation,
    IdentitySurrogate, Inpainter, SweepPlan, SweepRow, ZeroFill, SWEEP_HEADER,
};
pub use trainer::{composite, masked_input, StepLosses, Trainer};
