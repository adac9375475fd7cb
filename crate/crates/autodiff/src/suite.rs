//! The per-operator gradient-check table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::kernels::ConvGeom;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by the suite.
pub const SUITE_EPS: f64 = 1e-5;

/// Worst relative error over all cases of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl SuiteRow {
    pub fn merge(&mut self, max_rel_error: f64, coords: usize) {
        self.max_rel_error = self.max_rel_error.max(max_rel_error);
        self.coords_checked += coords;
    }
}

type Objective = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Reduces a tensor to a scalar through a fixed projection so that every
/// output coordinate carries a distinct weight.
pub fn project<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let mut k = 0u64;
    let w = Tensor::from_fn(&shape, |i| {
        k = k.wrapping_add(i as u64 * 2654435761 + 1) % 1000;
        0.3 + k as f64 / 700.0
    });
    v.mul(v.tape().constant(w))?.sum()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, off_zero: bool) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if off_zero {
            // away from the kinks of relu, leaky relu and clamp
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        } else {
            rng.gen_range(-1.0..1.0)
        }
    })
}

struct Check {
    name: &'static str,
    f: Objective,
    shapes: Vec<Vec<Vec<usize>>>,
    off_zero: bool,
}

fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.to_vec()).collect()
}

fn checks() -> Vec<Check> {
    let elementwise = vec![
        s(&[&[3], &[3]]),
        s(&[&[2, 3, 4, 4], &[2, 3, 4, 4]]),
        s(&[&[1, 1, 5, 7], &[1, 1, 5, 7]]),
    ];
    let conv = vec![
        s(&[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]]),
        s(&[&[2, 3, 9, 8], &[2, 3, 3, 3], &[2]]),
        s(&[&[1, 1, 11, 11], &[2, 1, 1, 1], &[2]]),
    ];
    let adjoint = vec![
        s(&[&[1, 2, 7, 7], &[3, 2, 3, 3]]),
        s(&[&[2, 1, 8, 6], &[2, 1, 3, 3]]),
        s(&[&[1, 3, 5, 5], &[1, 3, 3, 3]]),
    ];
    let unary = vec![s(&[&[7]]), s(&[&[2, 2, 3, 3]]), s(&[&[1, 4, 5, 2]])];
    let pairs = vec![
        s(&[&[1, 1, 2, 2], &[1, 2, 2, 2]]),
        s(&[&[2, 3, 3, 4], &[2, 1, 3, 4]]),
        s(&[&[1, 2, 4, 4], &[1, 3, 4, 4]]),
    ];
    let pool = vec![s(&[&[1, 1, 4, 4]]), s(&[&[2, 2, 6, 6]]), s(&[&[1, 3, 2, 8]])];
    let reduce = vec![s(&[&[5]]), s(&[&[2, 3, 4, 4]]), s(&[&[3, 1, 2, 5]])];
    let bias = vec![
        s(&[&[1, 2, 3, 3], &[2]]),
        s(&[&[2, 3, 2, 4], &[3]]),
        s(&[&[1, 1, 5, 5], &[1]]),
    ];
    let penalty = vec![
        s(&[&[1, 2, 6, 6], &[3, 2, 3, 3], &[1, 3, 1, 1]]),
        s(&[&[2, 1, 8, 8], &[2, 1, 3, 3], &[1, 2, 1, 1]]),
        s(&[&[1, 3, 5, 5], &[2, 3, 3, 3], &[1, 2, 1, 1]]),
    ];

    let c = |name, f: Objective, shapes: &Vec<Vec<Vec<usize>>>, off_zero| Check {
        name,
        f,
        shapes: shapes.clone(),
        off_zero,
    };
    vec![
        c("add", |_, v| project(v[0].add(v[1])?), &elementwise, false),
        c("sub", |_, v| project(v[0].sub(v[1])?), &elementwise, false),
        c("mul", |_, v| project(v[0].mul(v[1])?), &elementwise, false),
        c(
            "scale/add_scalar/neg/rsub_scalar",
            |_, v| project(v[0].scale(-1.7)?.add_scalar(0.3)?.neg()?.rsub_scalar(2.0)?.mul(v[1])?),
            &elementwise,
            false,
        ),
        c("div_scalar", |_, v| project(v[0].div_scalar(-3.7)?), &unary, false),
        c("square", |_, v| project(v[0].square()?), &unary, false),
        c(
            "conv2d stride 1",
            |_, v| project(v[0].conv2d(v[1], Some(v[2]), ConvGeom::new(1, 1, 1))?),
            &conv,
            false,
        ),
        c(
            "conv2d stride 2",
            |_, v| project(v[0].conv2d(v[1], Some(v[2]), ConvGeom::new(2, 1, 1))?),
            &conv,
            false,
        ),
        c(
            "conv2d dilated",
            |_, v| project(v[0].conv2d(v[1], Some(v[2]), ConvGeom::new(1, 2, 2))?),
            &conv,
            false,
        ),
        c(
            "conv2d_input_grad",
            |_, v| {
                let g = ConvGeom::new(2, 1, 1);
                let up = v[0].conv2d(v[1], None, g)?.square()?;
                project(up.conv2d_input_grad(v[1], g, &v[0].shape())?)
            },
            &adjoint,
            false,
        ),
        c(
            "conv2d_weight_grad",
            |_, v| {
                let g = ConvGeom::new(1, 2, 2);
                let up = v[0].conv2d(v[1], None, g)?.square()?;
                project(v[0].conv2d_weight_grad(up, g, &v[1].shape())?)
            },
            &adjoint,
            false,
        ),
        c("add_channel_bias", |_, v| project(v[0].add_channel_bias(v[1])?), &bias, false),
        c("relu", |_, v| project(v[0].relu()?), &unary, true),
        c("leaky_relu", |_, v| project(v[0].leaky_relu(0.2)?), &unary, true),
        c("sigmoid", |_, v| project(v[0].sigmoid()?), &unary, false),
        c("softplus", |_, v| project(v[0].scale(4.0)?.softplus()?), &unary, false),
        c(
            "ln/reciprocal",
            |_, v| {
                let pos = v[0].square()?.add_scalar(0.5)?;
                project(pos.ln()?.add(pos.reciprocal()?)?)
            },
            &unary,
            false,
        ),
        c("clamp", |_, v| project(v[0].scale(3.0)?.clamp(-1.0, 1.0)?), &unary, true),
        c("reshape", |_, v| project(v[0].reshape(&[v[0].value().len()])?.square()?), &unary, false),
        c("upsample_nearest", |_, v| project(v[0].upsample_nearest(2)?), &pairs, false),
        c("concat_channels", |t, v| project(t.concat_channels(&[v[0], v[1], v[0]])?), &pairs, false),
        c(
            "slice_channels",
            |_, v| project(v[1].slice_channels(v[1].shape()[1] - 1, 1)?),
            &pairs,
            false,
        ),
        c("sum_pool", |_, v| project(v[0].sum_pool(2)?), &pool, false),
        c("sum", |_, v| v[0].square()?.sum(), &reduce, false),
        c("mean", |_, v| v[0].square()?.mean(), &reduce, false),
        c("sum_per_sample", |_, v| project(v[0].square()?.sum_per_sample()?), &reduce, false),
        c("mean_per_sample", |_, v| project(v[0].square()?.mean_per_sample()?), &reduce, false),
        c(
            "expand_per_sample",
            |_, v| {
                let per = v[0].square()?.mean_per_sample()?;
                project(per.expand_per_sample(&v[0].shape())?.mul(v[0])?)
            },
            &reduce,
            false,
        ),
        c(
            "masked_sum/masked_mean",
            |_, v| {
                let mask = Tensor::from_fn(&v[0].shape(), |i| (i % 3 == 0) as u8 as f64);
                let a = v[0].square()?.masked_mean(&mask)?.value;
                let b = v[0].masked_sum(&mask)?;
                a.add(b.scale(0.5)?)
            },
            &reduce,
            false,
        ),
        c(
            "gradient penalty (second order)",
            |t, v| {
                let h = v[0]
                    .conv2d(v[1], None, ConvGeom::new(2, 1, 1))?
                    .leaky_relu(0.2)?
                    .upsample_nearest(2)?;
                let score = h.conv2d(v[2], None, ConvGeom::new(1, 0, 1))?.sigmoid()?.mean()?;
                let gx = t.grad(score, &[v[0]])?[0];
                gx.square()?.sum()
            },
            &penalty,
            true,
        ),
    ]
}

/// Runs every operator check on seeded random inputs, three shape cases each.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for check in checks() {
        let mut row = SuiteRow {
            name: check.name.to_string(),
            max_rel_error: 0.0,
            coords_checked: 0,
        };
        for case in &check.shapes {
            let inputs: Vec<Tensor> = case.iter().map(|s| random(s, &mut rng, check.off_zero)).collect();
            let r = grad_check(check.f, &inputs, SUITE_EPS)?;
            row.merge(r.max_rel_error, r.coords_checked);
        }
        rows.push(row);
    }
    Ok(rows)
}
