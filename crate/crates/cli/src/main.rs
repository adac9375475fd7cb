use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use texfill::data::{
    load_image, load_mask, make_synthetic_dataset, save_image, save_mask, DatasetManifest, Split,
    TextureKind,
};
use texfill::gradsuite;
use texfill::masking::{build_mask_suite, MaskSource, MaskSuite};
use texfill::metrics::{format_value, Summary};
use texfill::models::Arm;
use texfill::train::{
    checkpoint_hash, dump_segmaps, evaluate, segmentation_auc, sweep_coverage, sweep_to_csv,
    Checkpoint, StepLosses, SweepPlan, TrainConfig, Trainer,
};
use texfill::Tensor;

#[derive(Parser)]
#[command(name = "texfill", version, about = "Texture inpainting with a segmentation discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed; every random stream is derived from it. For config-driven
    /// commands it overrides `seed` from --config/--set [default: config value, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results are bitwise identical for any value
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory; `config.echo` is written here
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Training config file of `key = value` lines [default: none, built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, applied after --config; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset manifest (synthetic textures or an image folder)
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training images
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        /// Test images
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        /// Comma-separated texture kinds: stripes, checker, sinusoid_mix, layered_bands
        #[arg(long, default_value = "stripes,layered_bands")]
        kinds: String,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Index PNGs under DIR/{train,val,test} instead of generating textures [default: none]
        #[arg(long, value_name = "DIR")]
        from_folder: Option<PathBuf>,
        /// With --from-folder, center-crop larger images instead of rejecting them [default: off]
        #[arg(long, default_value_t = false)]
        center_crop: bool,
        /// Also render every image as PNG under OUT/images [default: off]
        #[arg(long, default_value_t = false)]
        render: bool,
    },
    /// Build a fixed, reproducible test-mask suite
    MakeMasks {
        #[command(flatten)]
        common: Common,
        /// rectangles | stripes:COUNT:WIDTH | fixed:HOLE_FRACTION
        #[arg(long, default_value = "rectangles")]
        source: String,
        /// Number of masks
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Mask side length
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write each mask as a PNG under OUT/masks [default: off]
        #[arg(long, default_value_t = false)]
        png: bool,
    },
    /// Train a generator and discriminator
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest from `gen-data` (required)
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint; --config/--set are applied on top of its config [default: none]
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Mask suite used every `eval_interval` steps [default: none, no periodic eval]
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Score a checkpoint on a fixed mask suite
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest from `gen-data` (required)
        #[arg(long)]
        manifest: PathBuf,
        /// Mask suite from `make-masks` (required)
        #[arg(long)]
        masks: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Method label written to the CSV [default: the checkpoint's arm]
        #[arg(long)]
        method: Option<String>,
    },
    /// Train and evaluate one model per coverage level and arm
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest from `gen-data` (required)
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated observed fractions
        #[arg(long, default_value = "0.45,0.65,0.85")]
        levels: String,
        /// Comma-separated arms: saad, patch_mean, global
        #[arg(long, default_value = "saad,patch_mean,global")]
        arms: String,
    },
    /// Inpaint one image
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB or grayscale PNG, center-cropped to the model's image size (required)
        #[arg(long)]
        image: PathBuf,
        /// Grayscale PNG; pixels >= 128 are holes (required)
        #[arg(long)]
        mask: PathBuf,
    },
    /// Write input / inpainted / segmentation-map PNGs
    DumpSegmaps {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (required)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest from `gen-data` (required)
        #[arg(long)]
        manifest: PathBuf,
        /// Mask suite from `make-masks` (required)
        #[arg(long)]
        masks: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Images to dump
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Finite-difference check of every op and the training graphs
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Maximum allowed relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    })
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| anyhow::anyhow!("{what} `{p}`: {e}")))
        .collect()
}

fn resolve_config(base: TrainConfig, args: &ConfigArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config.apply_text(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set `{kv}`: expected KEY=VALUE"))?;
        config.set(k, v)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Writes `config.echo`: the command and its resolved flags, then the full
/// training config when one applies.
fn write_echo(out: &Path, command: &str, flags: &[(&str, String)], config: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut text = format!("# texfill {command}\n");
    for (k, v) in flags {
        let _ = writeln!(text, "{k} = {v}");
    }
    if let Some(c) = config {
        text.push_str("\n# training config\n");
        text.push_str(&c.echo());
    }
    let path = out.join("config.echo");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn common_flags(c: &Common) -> Vec<(&'static str, String)> {
    vec![
        ("seed", c.seed.map_or("none".into(), |s| s.to_string())),
        ("threads", c.threads.to_string()),
        ("out", c.out.display().to_string()),
    ]
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn load_split(manifest: &Path, split: Split) -> Result<(DatasetManifest, Vec<Tensor>)> {
    let m = DatasetManifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let images = m.load_split(split, base)?;
    Ok((m, images))
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    Ok(Checkpoint::load(path)?.into_trainer()?)
}

fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<String> {
    let bytes = Checkpoint::capture(trainer).to_bytes();
    fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(checkpoint_hash(&bytes))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n_train,
            n_test,
            kinds,
            image_size,
            channels,
            from_folder,
            center_crop,
            render,
        } => {
            let seed = common.seed.unwrap_or(0);
            let mut flags = common_flags(&common);
            flags.extend([
                ("n_train", n_train.to_string()),
                ("n_test", n_test.to_string()),
                ("kinds", kinds.clone()),
                ("image_size", image_size.to_string()),
                ("channels", channels.to_string()),
                ("from_folder", opt_path(&from_folder)),
                ("center_crop", center_crop.to_string()),
                ("render", render.to_string()),
            ]);
            write_echo(&common.out, "gen-data", &flags, None)?;
            let mut manifest = match &from_folder {
                Some(root) => DatasetManifest::from_folder(root, image_size, channels, center_crop)?,
                None => {
                    let kinds: Vec<TextureKind> = parse_list("texture kind", &kinds)?;
                    make_synthetic_dataset(n_train, n_test, &kinds, seed, image_size, channels)?
                }
            };
            // file entries must stay valid from the manifest's own location
            if let Some(root) = &from_folder {
                let root = fs::canonicalize(root)?;
                for split in [&mut manifest.train, &mut manifest.val, &mut manifest.test] {
                    for e in split.iter_mut() {
                        if let texfill::data::Entry::File(p) = e {
                            *p = root.join(&*p);
                        }
                    }
                }
            }
            let path = common.out.join("manifest.txt");
            manifest.save(&path)?;
            if render {
                for split in Split::ALL {
                    let dir = common.out.join("images").join(split.name());
                    let images = manifest.load_split(split, &common.out)?;
                    if images.is_empty() {
                        continue;
                    }
                    fs::create_dir_all(&dir)?;
                    for (i, img) in images.iter().enumerate() {
                        save_image(img, &dir.join(format!("{i:04}.png")))?;
                    }
                }
            }
            println!(
                "wrote {} ({} train, {} val, {} test)",
                path.display(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len()
            );
        }

        Command::MakeMasks {
            common,
            source,
            count,
            size,
            png,
        } => {
            let seed = common.seed.unwrap_or(0);
            let mut flags = common_flags(&common);
            flags.extend([
                ("source", source.clone()),
                ("count", count.to_string()),
                ("size", size.to_string()),
                ("png", png.to_string()),
            ]);
            write_echo(&common.out, "make-masks", &flags, None)?;
            let source: MaskSource = source.parse()?;
            let suite = build_mask_suite(source, size, size, seed, count)?;
            let path = common.out.join("masks.bin");
            suite.save(&path)?;
            if png {
                let dir = common.out.join("masks");
                fs::create_dir_all(&dir)?;
                for (i, m) in suite.masks.iter().enumerate() {
                    save_mask(m, 0, &dir.join(format!("{i:04}.png")))?;
                }
            }
            let cov: Vec<f64> = suite.masks.iter().map(texfill::metrics::coverage).collect();
            let s = Summary::of(&cov);
            println!(
                "wrote {} ({count} masks, coverage {:.4} +/- {:.4})",
                path.display(),
                s.mean,
                s.std
            );
        }

        Command::Train {
            common,
            config,
            manifest,
            resume,
            masks,
        } => {
            let resumed = resume.as_deref().map(Checkpoint::load).transpose()?;
            let base = resumed.as_ref().map_or_else(TrainConfig::default, |c| c.config.clone());
            let cfg = resolve_config(base, &config, common.seed)?;
            let mut flags = common_flags(&common);
            flags.extend([
                ("config", opt_path(&config.config)),
                ("set", config.set.join(" ")),
                ("manifest", manifest.display().to_string()),
                ("resume", opt_path(&resume)),
                ("masks", opt_path(&masks)),
            ]);
            write_echo(&common.out, "train", &flags, Some(&cfg))?;

            let mut trainer = match resumed {
                Some(mut c) => {
                    let same_model = c.config.generator_config() == cfg.generator_config()
                        && c.config.saad_config() == cfg.saad_config();
                    if !same_model {
                        bail!("--config/--set change the model architecture of the resumed checkpoint");
                    }
                    c.config = cfg.clone();
                    c.into_trainer()?
                }
                None => Trainer::new(cfg.clone())?,
            };
            let (m, images) = load_split(&manifest, Split::Train)?;
            if m.image_size != cfg.image_size || m.channels != cfg.channels {
                bail!(
                    "manifest images are {}x{}x{}, config expects {}x{}x{}",
                    m.channels,
                    m.image_size,
                    m.image_size,
                    cfg.channels,
                    cfg.image_size,
                    cfg.image_size
                );
            }
            let eval_set = match &masks {
                Some(p) if cfg.eval_interval > 0 => Some((MaskSuite::load(p)?, m.load_split(Split::Test, manifest.parent().unwrap_or(Path::new(".")))?)),
                _ => None,
            };

            let ckpt_dir = common.out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            let log_path = common.out.join("train_log.csv");
            let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            writeln!(log, "{}", StepLosses::HEADER)?;
            let mut eval_log = match &eval_set {
                Some(_) => {
                    let mut f = fs::File::create(common.out.join("eval_log.csv"))?;
                    writeln!(f, "step,psnr_db,ssim,pixel_auc")?;
                    Some(f)
                }
                None => None,
            };

            let result = trainer.run(&images, cfg.steps, |t, losses| {
                let io = |e: std::io::Error| texfill::Error::Mismatch(format!("writing logs: {e}"));
                writeln!(log, "{}", losses.log_line()).map_err(io)?;
                let step = losses.step;
                if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                    let bytes = Checkpoint::capture(t).to_bytes();
                    let path = ckpt_dir.join(format!("step_{step:06}.ckpt"));
                    fs::write(&path, bytes).map_err(io)?;
                }
                if let (Some((suite, test)), Some(f)) = (&eval_set, eval_log.as_mut()) {
                    if step % cfg.eval_interval == 0 {
                        let e = evaluate(t, "", "", test, suite, cfg.hole_fill)?;
                        let auc = segmentation_auc(t, test, suite)?;
                        writeln!(
                            f,
                            "{step},{},{},{}",
                            format_value(e.aggregate.psnr_db.mean),
                            format_value(e.aggregate.ssim.mean),
                            format_value(auc)
                        )
                        .map_err(io)?;
                    }
                }
                Ok(())
            });
            if let Err(e) = result {
                if matches!(e, texfill::Error::NonFiniteLoss { .. }) {
                    let dump = common.out.join("diverged.ckpt");
                    save_checkpoint(&trainer, &dump)?;
                    fs::write(common.out.join("diverged.txt"), format!("{e}\n"))?;
                }
                return Err(e.into());
            }
            let final_path = common.out.join("final.ckpt");
            let hash = save_checkpoint(&trainer, &final_path)?;
            println!("trained to step {} -> {}", trainer.step, final_path.display());
            println!("checkpoint_hash {hash}");
        }

        Command::Eval {
            common,
            checkpoint,
            manifest,
            masks,
            split,
            method,
        } => {
            let mut flags = common_flags(&common);
            flags.extend([
                ("checkpoint", checkpoint.display().to_string()),
                ("manifest", manifest.display().to_string()),
                ("masks", masks.display().to_string()),
                ("split", split.clone()),
                ("method", method.clone().unwrap_or_else(|| "checkpoint arm".into())),
            ]);
            let trainer = load_trainer(&checkpoint)?;
            write_echo(&common.out, "eval", &flags, Some(&trainer.config))?;
            let (_, images) = load_split(&manifest, parse_split(&split)?)?;
            let suite = MaskSuite::load(&masks)?;
            let method = method.unwrap_or_else(|| trainer.config.arm.to_string());
            let ckpt_name = checkpoint.display().to_string();
            let e = evaluate(&trainer, &method, &ckpt_name, &images, &suite, trainer.config.hole_fill)?;
            let auc = segmentation_auc(&trainer, &images, &suite)?;
            let path = common.out.join("metrics.csv");
            fs::write(&path, e.to_csv())?;
            let a = &e.aggregate;
            println!("images {}", a.psnr_db.count);
            println!("psnr_db {} +/- {}", format_value(a.psnr_db.mean), format_value(a.psnr_db.std));
            println!("ssim {} +/- {}", format_value(a.ssim.mean), format_value(a.ssim.std));
            println!("pixel_auc {}", format_value(auc));
            println!("wrote {}", path.display());
        }

        Command::Sweep {
            common,
            config,
            manifest,
            levels,
            arms,
        } => {
            let cfg = resolve_config(TrainConfig::default(), &config, common.seed)?;
            let mut flags = common_flags(&common);
            flags.extend([
                ("config", opt_path(&config.config)),
                ("set", config.set.join(" ")),
                ("manifest", manifest.display().to_string()),
                ("levels", levels.clone()),
                ("arms", arms.clone()),
            ]);
            write_echo(&common.out, "sweep", &flags, Some(&cfg))?;
            let levels: Vec<f64> = parse_list("coverage level", &levels)?;
            let arms: Vec<Arm> = parse_list("arm", &arms)?;
            let (m, train) = load_split(&manifest, Split::Train)?;
            let test = m.load_split(Split::Test, manifest.parent().unwrap_or(Path::new(".")))?;
            let plan = SweepPlan {
                base: &cfg,
                levels: &levels,
                arms: &arms,
                train: &train,
                test: &test,
                suite_seed: cfg.seed,
            };
            let rows = sweep_coverage(&plan, |r| {
                println!(
                    "coverage {} {}: psnr_db {} ssim {}",
                    format_value(r.coverage),
                    r.method,
                    format_value(r.psnr_db),
                    format_value(r.ssim)
                );
            })?;
            let path = common.out.join("sweep.csv");
            fs::write(&path, sweep_to_csv(&rows))?;
            println!("wrote {}", path.display());
        }

        Command::Infer {
            common,
            checkpoint,
            image,
            mask,
        } => {
            let mut flags = common_flags(&common);
            flags.extend([
                ("checkpoint", checkpoint.display().to_string()),
                ("image", image.display().to_string()),
                ("mask", mask.display().to_string()),
            ]);
            let trainer = load_trainer(&checkpoint)?;
            write_echo(&common.out, "infer", &flags, Some(&trainer.config))?;
            let x = load_image(&image, Some(trainer.config.image_size))?;
            let m = load_mask(&mask)?;
            let out = trainer.inpaint(&x, &m)?;
            let path = common.out.join("inpainted.png");
            save_image(&out, &path)?;
            println!("wrote {}", path.display());
        }

        Command::DumpSegmaps {
            common,
            checkpoint,
            manifest,
            masks,
            split,
            limit,
        } => {
            let mut flags = common_flags(&common);
            flags.extend([
                ("checkpoint", checkpoint.display().to_string()),
                ("manifest", manifest.display().to_string()),
                ("masks", masks.display().to_string()),
                ("split", split.clone()),
                ("limit", limit.to_string()),
            ]);
            let trainer = load_trainer(&checkpoint)?;
            write_echo(&common.out, "dump-segmaps", &flags, Some(&trainer.config))?;
            let (_, mut images) = load_split(&manifest, parse_split(&split)?)?;
            images.truncate(limit);
            let suite = MaskSuite::load(&masks)?;
            let written = dump_segmaps(&trainer, &images, &suite.masks, &common.out)?;
            println!("wrote {} files to {}", written.len(), common.out.display());
        }

        Command::GradCheck { common, tolerance } => {
            let mut flags = common_flags(&common);
            flags.push(("tolerance", tolerance.to_string()));
            write_echo(&common.out, "grad-check", &flags, None)?;
            let rows = gradsuite::full_suite(common.seed.unwrap_or(0))?;
            print!("{}", gradsuite::format_table(&rows, tolerance));
            let failed = rows.iter().filter(|r| r.max_rel_error.is_nan() || r.max_rel_error >= tolerance).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks exceed {tolerance:e}", rows.len());
            }
        }
    }
    Ok(())
}

fn threads(cli: &Cli) -> usize {
    match &cli.command {
        Command::GenData { common, .. }
        | Command::MakeMasks { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Sweep { common, .. }
        | Command::Infer { common, .. }
        | Command::DumpSegmaps { common, .. }
        | Command::GradCheck { common, .. } => common.threads,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let n = threads(&cli).max(1);
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting the thread pool")
        .and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("ERROR: {msg}");
            ExitCode::from(1)
        }
    }
}
