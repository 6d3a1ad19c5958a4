//! Finite-difference checks of the tape gradients through every loss.

use ctxclip::autodiff::{grad_check, Axis, Tape, Tensor};
use ctxclip::encoders::{embed_images, embed_texts, ModelDims, ModelParams};
use ctxclip::losses::{contextual_loss, contrastive_loss, total_loss, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn points(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Max relative error of `loss(moving, fixed)` w.r.t. the raw `moving` rows,
/// normalized inside the objective.
fn check_side(
    n: usize,
    d: usize,
    moving: &[f64],
    fixed: &[f64],
    image_side: bool,
    which: &str,
    cfg: &LossConfig<f64>,
) -> f64 {
    grad_check(
        |tape: &Tape<f64>, x: &Tensor<f64>| {
            let a = tape.l2_normalize_rows(&tape.reshape(x, &[n, d])?, 1e-12)?;
            let b = tape.l2_normalize_rows(&Tensor::matrix(n, d, fixed.to_vec())?, 1e-12)?;
            let (img, txt) = if image_side { (a, b) } else { (b, a) };
            match which {
                "contrastive" => contrastive_loss(tape, &img, &txt, cfg),
                "contextual" => contextual_loss(tape, &img, &txt, cfg),
                _ => total_loss(tape, &img, &txt, &img, &txt, cfg).map(|(l, _)| l),
            }
        },
        moving,
        STEP,
    )
    .unwrap()
    .max_rel_error
}

#[test]
fn losses_pass_grad_check_over_sizes_and_seeds() {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for n in [2, 4, 8] {
        for d in [4, 16] {
            for seed in 0..3 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let u = points(&mut rng, n * d);
                let v = points(&mut rng, n * d);
                for which in ["contrastive", "contextual", "total"] {
                    worst = worst.max(check_side(n, d, &u, &v, true, which, &cfg));
                    worst = worst.max(check_side(n, d, &v, &u, false, which, &cfg));
                }
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn symmetric_contextual_gradients() {
    let cfg = LossConfig { symmetric_contextual: true, ..LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = points(&mut rng, 24);
    let v = points(&mut rng, 24);
    assert!(check_side(4, 6, &u, &v, true, "contextual", &cfg) < 1e-4);
}

#[test]
fn primitive_ops_pass_tight_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type Op = fn(&Tape<f64>, &Tensor<f64>) -> ctxclip::Result<Tensor<f64>>;
    let ops: [(&str, Op); 8] = [
        ("exp", |t, x| t.sum(&t.exp(x)?, Axis::All)),
        ("log", |t, x| t.sum(&t.log(&t.offset(&t.mul(x, x)?, 1.0)?)?, Axis::All)),
        ("matmul", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            t.sum(&t.matmul(&m, &t.transpose(&m)?)?, Axis::All)
        }),
        ("div", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            let den = t.offset(&t.mul(&m, &m)?, 0.5)?;
            t.sum(&t.div(&m, &den)?, Axis::All)
        }),
        ("row_max", |t, x| t.sum(&t.max(&t.reshape(x, &[2, 3])?, Axis::PerRow)?, Axis::All)),
        ("col_mean", |t, x| {
            let m = t.reshape(x, &[2, 3])?;
            t.sum(&t.mul(&t.mean(&m, Axis::PerCol)?, &t.mean(&m, Axis::PerCol)?)?, Axis::All)
        }),
        ("normalize", |t, x| {
            let m = t.l2_normalize_rows(&t.reshape(x, &[2, 3])?, 1e-12)?;
            t.sum(&t.mul(&m, &Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0])?)?, Axis::All)
        }),
        ("sqrt_relu", |t, x| t.sum(&t.sqrt(&t.offset(&t.relu(x)?, 1.0)?)?, Axis::All)),
    ];
    for (name, op) in ops {
        for _ in 0..20 {
            // keep away from the relu kink and max ties
            let x: Vec<f64> = (0..6).map(|i| rng.gen_range(0.1..1.0) * if i % 2 == 0 { 1.0 } else { -1.0 } + i as f64 * 0.01).collect();
            let r = grad_check(op, &x, STEP).unwrap();
            assert!(r.max_rel_error < 1e-6, "{name}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn every_parameter_array_receives_gradient() {
    let dims = ModelDims { d_img: 6, d_hid: 5, d_i: 4, d_emb: 3, d_t: 4, d_e: 3, vocab_size: 12 };
    let params = ModelParams::<f64>::init(19, dims).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::matrix(4, 6, points(&mut rng, 24)).unwrap();
    let tokens: Vec<Vec<u32>> = vec![vec![5, 6, 1], vec![7, 8, 2], vec![9, 10, 3], vec![11, 5, 4]];
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let img = embed_images(&tape, &bound, &images).unwrap();
    let txt = embed_texts(&tape, &bound, &tokens).unwrap();
    let (loss, _) = total_loss(&tape, &img, &txt, &img, &txt, &LossConfig::default()).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for (name, leaf) in bound.iter() {
        let g = grads.wrt(leaf).unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn backward_twice_is_identical() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 0.4]).unwrap());
    let y = tape.sum(&tape.exp(&tape.matmul(&x, &x).unwrap()).unwrap(), Axis::All).unwrap();
    let a = tape.backward(&y).unwrap().wrt(&x).unwrap().to_vec();
    let b = tape.backward(&y).unwrap().wrt(&x).unwrap().to_vec();
    assert_eq!(a, b);
}
