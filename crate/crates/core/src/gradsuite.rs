//! Finite-difference checks of every autodiff op plus the composite graphs
//! training actually differentiates.

use autodiff::{grad_check_with, op_suite, GradCheckOptions, SuiteRow, Tape, Tensor, Var, SUITE_EPS};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{discriminator_loss, generator_loss, masked_mse, seg_bce, LossWeights};
use crate::masking::Mask;
use crate::models::{compose_output, Arm, Generator, GeneratorConfig, Saad, SaadConfig};
use crate::nn::{InitSpec, ParamStore};

/// Side of the square test image used by the composite checks.
pub const COMPOSITE_SIZE: usize = 16;
/// Coordinates probed per parameter tensor in the composite checks.
pub const COMPOSITE_COORDS: usize = 64;

fn small_generator() -> Result<Generator> {
    Generator::new(GeneratorConfig {
        image_channels: 3,
        mask_channel: true,
        base_channels: 4,
        depth: 2,
        dilations: vec![2],
        image_size: COMPOSITE_SIZE,
    })
}

fn small_saad() -> Result<Saad> {
    Saad::new(SaadConfig {
        image_channels: 3,
        channels: vec![4, 6, 8],
        strides: vec![1, 2, 2],
    })
}

/// A hole rectangle plus a few scattered hole pixels.
fn test_mask() -> Result<Mask> {
    let n = COMPOSITE_SIZE;
    let t = Tensor::from_fn(&[1, 1, n, n], |i| {
        let (y, x) = (i / n, i % n);
        let rect = (4..10).contains(&y) && (5..12).contains(&x);
        (rect || i % 37 == 0) as u8 as f64
    });
    Mask::new(t)
}

fn store_values(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|p| p.value.clone()).collect()
}

fn masked<'t>(tape: &'t Tape, x: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let keep = mask.expanded(3)?.map(|h| 1.0 - h);
    Ok(x.mul(tape.constant(keep))?)
}

fn row(name: &str, inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>) -> Result<SuiteRow> {
    let opts = GradCheckOptions {
        eps: SUITE_EPS,
        max_coords_per_input: Some(COMPOSITE_COORDS),
    };
    // the checker speaks autodiff errors; carry ours through a side slot
    let failure = std::cell::RefCell::new(None);
    let r = grad_check_with(
        |t, v| match f(t, v) {
            Ok(out) => Ok(out),
            Err(e) => {
                let msg = e.to_string();
                failure.borrow_mut().get_or_insert(e);
                Err(autodiff::AutodiffError::InvalidArgument { op: "objective", reason: msg })
            }
        },
        inputs,
        opts,
    );
    match (r, failure.into_inner()) {
        (_, Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
        (Ok(r), None) => Ok(SuiteRow {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        }),
    }
}

/// The four composite graphs at `1×3×16×16` with seeded inputs and weights.
pub fn composite_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = COMPOSITE_SIZE;
    let x = Tensor::from_fn(&[1, 3, n, n], |_| rng.gen_range(0.0..1.0));
    let fake = Tensor::from_fn(&[1, 3, n, n], |_| rng.gen_range(0.0..1.0));
    let mask = test_mask()?;
    let generator = small_generator()?;
    let saad = small_saad()?;
    let gen_params = generator.init(InitSpec { seed: rng.gen() })?;
    let disc_params = saad.init(InitSpec { seed: rng.gen() })?;
    let weights = LossWeights {
        lambda_r: 1.0,
        lambda_adv: 0.5,
        gamma: 10.0,
    };

    let with_x = |store: &ParamStore| {
        let mut v = vec![x.clone()];
        v.extend(store_values(store));
        v
    };
    let mut rows = Vec::new();

    rows.push(row("masked_mse o generator", &with_x(&gen_params), |t, v| {
        let bound = gen_params.bind_vars(&v[1..])?;
        let xm = masked(t, v[0], &mask)?;
        let out = generator.forward(&bound, xm, &mask)?;
        let x_final = compose_output(xm, out, &mask)?;
        Ok(masked_mse(v[0], x_final, &mask)?.value)
    })?);

    rows.push(row("seg_bce o saad", &with_x(&disc_params), |_, v| {
        let bound = disc_params.bind_vars(&v[1..])?;
        let logits = saad.forward(&bound, v[0])?.logits;
        seg_bce(logits, &mask)
    })?);

    rows.push(row("generator_loss (saad arm)", &with_x(&gen_params), |t, v| {
        let bound = gen_params.bind_vars(&v[1..])?;
        let frozen = disc_params.bind(t, false);
        let critic = saad.bind(&frozen);
        let xm = masked(t, v[0], &mask)?;
        let out = generator.forward(&bound, xm, &mask)?;
        let x_final = compose_output(xm, out, &mask)?;
        Ok(generator_loss(&critic, Arm::Saad, v[0], x_final, &mask, &weights, false)?.total)
    })?);

    rows.push(row("discriminator_loss with R1", &store_values(&disc_params), |t, v| {
        let bound = disc_params.bind_vars(v)?;
        let critic = saad.bind(&bound);
        let x_fake = t.constant(fake.clone());
        Ok(discriminator_loss(t, &critic, Arm::Saad, &x, x_fake, &mask, &weights)?.total)
    })?);

    Ok(rows)
}

/// Every op row followed by every composite row.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = op_suite(seed)?;
    rows.extend(composite_suite(seed)?);
    Ok(rows)
}

/// Fixed-width table: name, worst relative error, coordinates probed.
pub fn format_table(rows: &[SuiteRow], tolerance: f64) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>12}  {:>7}  status\n", "check", "max_rel_err", "coords");
    for r in rows {
        let status = if r.max_rel_error < tolerance { "ok" } else { "FAIL" };
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>7}  {status}\n",
            r.name, r.max_rel_error, r.coords_checked
        ));
    }
    out
}
