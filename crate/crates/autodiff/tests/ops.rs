use autodiff::{op_suite, ConvGeom, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

const TOL: f64 = 1e-4;

#[test]
fn upsample_backward_sums_blocks() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
    let y = x.upsample_nearest(2).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0; 4]);
}

#[test]
fn activation_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![3], vec![0.0, 40.0, -40.0]).unwrap());
    let s = z.sigmoid().unwrap().value();
    assert_eq!(s.data()[0], 0.5);
    assert!((s.data()[1] - 1.0).abs() < 1e-15);
    assert!(s.data()[2].abs() < 1e-15 && s.data()[2] > 0.0);

    let x = tape.constant(Tensor::scalar(-2.0));
    assert!((x.leaky_relu(0.2).unwrap().item() + 0.4).abs() < 1e-15);
    assert!(x.leaky_relu(1.5).is_err());
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.1));
    let zeros = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let ones = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    let keep = x.mul(zeros.rsub_scalar(1.0).unwrap()).unwrap();
    assert!(keep.value().bitwise_eq(&x.value()));
    let drop = x.mul(ones.rsub_scalar(1.0).unwrap()).unwrap();
    assert_eq!(drop.value().max_abs(), 0.0);

    let a = tape.leaf(Tensor::scalar(2.0));
    let b = tape.leaf(Tensor::scalar(3.0));
    let g = tape.backward(a.mul(b).unwrap()).unwrap();
    assert_eq!(g.get(a).unwrap().item(), 3.0);
    assert_eq!(g.get(b).unwrap().item(), 2.0);

    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(a.add(c).is_err());
}

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = tape.leaf(Tensor::full(&[1, 1, 2, 2], 2.0));
    let cat = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(cat.value().data(), &[1., 1., 1., 1., 2., 2., 2., 2.]);
    let single = tape.concat_channels(&[a]).unwrap();
    assert!(single.value().bitwise_eq(&a.value()));
    let g = tape.backward(cat.sum().unwrap()).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0; 4]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);

    let wrong = tape.leaf(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(tape.concat_channels(&[a, wrong]).is_err());
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![4], vec![1., 2., 3., 4.]).unwrap());
    assert_eq!(x.mean().unwrap().item(), 2.5);

    let y = tape.leaf(Tensor::from_fn(&[8], |i| i as f64));
    let g = tape.backward(y.mean().unwrap()).unwrap();
    assert_eq!(g.get(y).unwrap().data(), &[0.125; 8]);

    let mut mask = Tensor::zeros(&[1, 1, 4, 4]);
    for i in [0, 3, 5, 6, 9, 12, 15] {
        mask.data_mut()[i] = 1.0;
    }
    let ones = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
    assert_eq!(ones.masked_sum(&mask).unwrap().item(), 7.0);

    let empty = ones.masked_mean(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    assert!(empty.empty_mask);
    assert_eq!(empty.value.item(), 0.0);

    // mask broadcast over channels
    let three = tape.constant(Tensor::ones(&[1, 3, 4, 4]));
    let m = three.masked_mean(&mask).unwrap();
    assert!(!m.empty_mask);
    assert_eq!(m.value.item(), 1.0);
    assert_eq!(three.masked_sum(&mask).unwrap().item(), 21.0);
    assert!(three.masked_sum(&Tensor::zeros(&[1, 1, 3, 3])).is_err());
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64));
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

    let z = tape.leaf(Tensor::zeros(&[4]));
    let root = z.sigmoid().unwrap().mean().unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[0.0625; 4]);

    let twice = x.add(x).unwrap().sum().unwrap();
    let once = x.sum().unwrap();
    let g2 = tape.backward(twice).unwrap();
    let g1 = tape.backward(once).unwrap();
    for (a, b) in g2.get(x).unwrap().data().iter().zip(g1.get(x).unwrap().data()) {
        assert_eq!(*a, 2.0 * b);
    }

    assert!(tape.backward(x).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    assert!(x.ln().is_err());
    assert!(x.reciprocal().is_err());
}

#[test]
fn vars_from_another_tape_are_rejected() {
    let a = Tape::new();
    let b = Tape::new();
    let x = a.leaf(Tensor::scalar(1.0));
    let y = b.leaf(Tensor::scalar(1.0));
    assert!(x.add(y).is_err());
    assert!(a.backward(y).is_err());
}

#[test]
fn every_op_passes_grad_check() {
    let rows = op_suite(17).unwrap();
    assert!(rows.len() >= 25);
    for r in &rows {
        assert!(r.coords_checked > 0, "{}", r.name);
        assert!(r.max_rel_error < TOL, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let run = || {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = xv
            .conv2d(wv, None, ConvGeom::new(2, 1, 1))
            .unwrap()
            .sigmoid()
            .unwrap()
            .mean()
            .unwrap();
        let g = tape.backward(y).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bitwise_eq(&b.0) && a.1.bitwise_eq(&b.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_shape_matches_formula(
        stride in 1usize..=2,
        padding in 0usize..=2,
        dilation in prop::sample::select(vec![1usize, 2, 4]),
        h in 1usize..24,
        w in 1usize..24,
        k in prop::sample::select(vec![1usize, 3]),
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, h, w]));
        let wt = tape.constant(Tensor::zeros(&[3, 2, k, k]));
        let out = x.conv2d(wt, None, ConvGeom::new(stride, padding, dilation));
        let len = |n: usize| -> isize {
            (n as isize + 2 * padding as isize - (dilation * (k - 1)) as isize - 1)
                .div_euclid(stride as isize) + 1
        };
        let (ho, wo) = (len(h), len(w));
        if ho >= 1 && wo >= 1 && (h + 2 * padding) > dilation * (k - 1)
            && (w + 2 * padding) > dilation * (k - 1) {
            prop_assert_eq!(out.unwrap().shape(), vec![1, 3, ho as usize, wo as usize]);
        } else {
            prop_assert!(out.is_err());
        }
    }

    #[test]
    fn fan_out_doubles_exactly(values in prop::collection::vec(-10.0f64..10.0, 1..16)) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![values.len()], values).unwrap());
        let once = tape.backward(x.sigmoid().unwrap().sum().unwrap()).unwrap();
        let twice = tape
            .backward(x.add(x).unwrap().sigmoid().unwrap().sum().unwrap())
            .unwrap();
        // d sigmoid(2x)/dx evaluated independently
        let y = tape.leaf((*x.value()).clone());
        let s = y.sigmoid().unwrap();
        let direct = tape.backward(s.sum().unwrap()).unwrap();
        prop_assert!(once.get(x).unwrap().bitwise_eq(direct.get(y).unwrap()));
        let tape2 = Tape::new();
        let z = tape2.leaf((*x.value()).clone());
        let g = tape2.backward(z.add(z).unwrap().sum().unwrap()).unwrap();
        prop_assert!(g.get(z).unwrap().data().iter().all(|&v| v == 2.0));
        prop_assert_eq!(twice.get(x).unwrap().len(), once.get(x).unwrap().len());
    }
}
