mod common;

use common::grad_check;
use decode_core::adcore::{digamma, lgamma, trigamma, AdamW, AdamWConfig, Tape, Tensor, Var};
use decode_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn softmax_weighted_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = random(&mut rng, 1, 5);
    let f = move |t: &Tape, v: &[Var]| -> Result<Var> {
        let s = t.softmax(v[0]);
        let w = t.constant(c.clone());
        Ok(t.sum(t.mul(s, w)?))
    };
    let err = grad_check(&f, &[random(&mut rng, 1, 5)]);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn tanh_layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 3, 1);
    let f = move |t: &Tape, v: &[Var]| -> Result<Var> {
        let xv = t.constant(x.clone());
        let y = t.tanh(t.matmul(v[0], xv)?);
        Ok(t.sum(t.square(y)))
    };
    let err = grad_check(&f, &[random(&mut rng, 4, 3)]);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = |t: &Tape, v: &[Var]| -> Result<Var> {
        let a = v[0]; // 2x3
        let b = v[1]; // 1x3
        let cat = t.concat(&[a, t.repeat_rows(b, 2)])?; // 2x6
        let parts = t.split(cat, &[2, 4])?;
        let g = t.gather_rows(parts[1], &[1, 0, 1])?; // 3x4
        let p = t.pick(g, &[0, 3, 2])?; // 3x1
        let flat = t.reshape(cat, 1, 12)?;
        let sl = t.slice_flat(flat, 3, 3, 2)?;
        let lse = t.log_sum_exp(sl);
        let bc = t.mul(sl, lse)?;
        let cols = t.sum_cols(bc);
        let rows = t.sum_rows(g);
        let s1 = t.sum(t.mul(cols, cols)?);
        let s2 = t.sum(t.exp(t.scale(rows, 0.3)));
        let s3 = t.sum(t.sin(p));
        let s4 = t.sum(t.cos(t.add_scalar(b, 0.5)));
        t.add(t.add(s1, s2)?, t.add(s3, s4)?)
    };
    let err = grad_check(&f, &[random(&mut rng, 2, 3), random(&mut rng, 1, 3)]);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn division_sqrt_log_and_gamma_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = |t: &Tape, v: &[Var]| -> Result<Var> {
        let pos = t.add_scalar(t.square(v[0]), 0.5);
        let q = t.div(v[1], pos)?;
        let l = t.log(pos);
        let r = t.sqrt(pos);
        let dg = t.digamma(pos)?;
        let lg = t.lgamma(pos)?;
        let s = t.add(t.mul(q, l)?, t.mul(r, dg)?)?;
        Ok(t.mean(t.sub(s, lg)?))
    };
    let err = grad_check(&f, &[random(&mut rng, 3, 4), random(&mut rng, 3, 4)]);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn special_functions_match_reference_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let x = 10f64.powf(rng.random_range(-3.0..3.0));
        let dg = digamma(x).unwrap();
        let lg = lgamma(x).unwrap();
        assert!((dg - statrs::function::gamma::digamma(x)).abs() < 1e-10, "digamma({x})");
        assert!((lg - statrs::function::gamma::ln_gamma(x)).abs() < 1e-10 * lg.abs().max(1.0), "lgamma({x})");
        // trigamma as the derivative of digamma
        let h = 1e-5 * x;
        let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
        assert!((trigamma(x).unwrap() - fd).abs() < 1e-5 * fd.abs().max(1.0), "trigamma({x})");
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&mut rng, 5, 4);
        let x = random(&mut rng, 7, 5);
        let tape = Tape::new();
        let wv = tape.param(w);
        let xv = tape.constant(x);
        let h = tape.tanh(tape.matmul(xv, wv).unwrap());
        let loss = tape.mean(tape.log_sum_exp(h));
        let g = tape.backward(loss).unwrap();
        (tape.item(loss).to_bits(), g.get(wv).into_data())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn adamw_minimizes_quadratic() {
    let cfg = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &[2]);
    let mut p = vec![3.0, -2.0];
    for _ in 0..500 {
        let tape = Tape::new();
        let v = tape.param(Tensor::row(p.clone()));
        let target = tape.constant(Tensor::row(vec![1.0, 0.5]));
        let loss = tape.sum(tape.square(tape.sub(v, target).unwrap()));
        let mut g = tape.backward(loss).unwrap();
        opt.step(&mut [&mut p[..]], &[g.take(v)]).unwrap();
    }
    assert!((p[0] - 1.0).abs() < 1e-2 && (p[1] - 0.5).abs() < 1e-2, "{p:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(v));
        let s = tape.value(tape.softmax(x));
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
    }
}
