//! Property-based invariants of the losses, encoders and evaluators.

use ctxclip::autodiff::{Tape, Tensor};
use ctxclip::encoders::{encode_text, project, ModelDims, ModelParams};
use ctxclip::eval::{classify_embeddings, project_2d, RetrievalIndex};
use ctxclip::losses::{contextual_affinity, contextual_loss, contrastive_loss, total_loss, LossConfig};
use ctxclip::data::{PairCorpus, PairRecord};
use proptest::prelude::*;

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

/// Two point sets of equal size with non-degenerate rows.
fn pair_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..=8, 2usize..=12)
        .prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))
        .prop_filter("non-zero rows", |(u, v)| {
            u.iter().chain(v).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        })
}

fn t(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contextual_rows_are_stochastic((u, v) in pair_sets()) {
        let tape = Tape::new();
        let r = contextual_affinity(&tape, &t(&u), &t(&v), &LossConfig::default()).unwrap();
        for i in 0..r.contextual.rows() {
            let s: f64 = r.contextual.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(r.contextual.row(i).iter().all(|x| (0.0..=1.0).contains(x)));
        }
        prop_assert!(r.cx_scalar > 0.0 && r.cx_scalar <= 1.0);
        let l = contextual_loss(&tape, &t(&u), &t(&v), &LossConfig::default()).unwrap().item();
        prop_assert!(l >= 0.0 && l <= (u.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn losses_are_permutation_equivariant((u, v) in pair_sets(), seed in any::<u64>()) {
        let n = u.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pu: Vec<Vec<f64>> = perm.iter().map(|&i| u[i].clone()).collect();
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let a = total_loss(&tape, &t(&u), &t(&v), &t(&u), &t(&v), &cfg).unwrap().1;
        let b = total_loss(&tape, &t(&pu), &t(&pv), &t(&pu), &t(&pv), &cfg).unwrap().1;
        prop_assert!((a.contrastive - b.contrastive).abs() < 1e-12);
        prop_assert!((a.contextual - b.contextual).abs() < 1e-12);
        prop_assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_ln_n_for_uniform_batches(n in 1usize..=16, row in prop::collection::vec(0.1f64..1.0, 5)) {
        let m = vec![row; n];
        let tape = Tape::new();
        let l = contrastive_loss(&tape, &t(&m), &t(&m), &LossConfig::default()).unwrap().item();
        prop_assert!((l - (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn projection_is_linear(a in matrix(4, 6), b in matrix(4, 6), w in matrix(6, 3)) {
        let tape = Tape::new();
        let sum: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
        let lhs = project(&tape, &t(&sum), &t(&w)).unwrap();
        let pa = project(&tape, &t(&a), &t(&w)).unwrap();
        let pb = project(&tape, &t(&b), &t(&w)).unwrap();
        for ((l, x), y) in lhs.values().iter().zip(pa.values()).zip(pb.values()) {
            prop_assert!((l - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_shot_argmax_is_scale_invariant(
        emb in matrix(10, 4),
        classes in matrix(3, 4),
        scales in prop::collection::vec(0.01f64..100.0, 3),
    ) {
        prop_assume!(classes.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let labels = vec![0; 10];
        let scaled: Vec<Vec<f64>> = classes.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let a = classify_embeddings(&t(&emb), &labels, &t(&classes), 1).unwrap();
        let b = classify_embeddings(&t(&emb), &labels, &t(&scaled), 1).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn text_encoder_ignores_order_and_padding(tokens in prop::collection::vec(1u32..20, 1..6), rot in 0usize..6) {
        let dims = ModelDims { d_img: 2, d_hid: 2, d_i: 2, d_emb: 4, d_t: 3, d_e: 2, vocab_size: 20 };
        let params = ModelParams::<f64>::init(1, dims).unwrap();
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let mut rotated = tokens.clone();
        rotated.rotate_left(rot % tokens.len());
        let mut padded = tokens.clone();
        padded.extend([0, 0, 0]);
        let a = encode_text(&tape, &bound, &[tokens.clone()]).unwrap();
        let b = encode_text(&tape, &bound, &[rotated]).unwrap();
        let c = encode_text(&tape, &bound, &[padded]).unwrap();
        for ((x, y), z) in a.values().iter().zip(b.values()).zip(c.values()) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_coordinates_are_uncorrelated(x in matrix(30, 5)) {
        let p = project_2d(&t(&x)).unwrap();
        let n = p.rows() as f64;
        let mean = |k: usize| (0..p.rows()).map(|i| p.at(i, k)).sum::<f64>() / n;
        let (m0, m1) = (mean(0), mean(1));
        let cov = |a: usize, ma: f64, b: usize, mb: f64| (0..p.rows()).map(|i| (p.at(i, a) - ma) * (p.at(i, b) - mb)).sum::<f64>();
        let (c00, c11, c01) = (cov(0, m0, 0, m0), cov(1, m1, 1, m1), cov(0, m0, 1, m1));
        prop_assert!(c00 >= c11 - 1e-9);
        prop_assert!(c01.abs() < 1e-6 * c00.max(1e-12));
    }

    #[test]
    fn retrieval_is_invariant_to_corpus_order(images in matrix(8, 4), seed in any::<u64>()) {
        let dims = ModelDims { d_img: 4, d_hid: 5, d_i: 4, d_emb: 3, d_t: 3, d_e: 3, vocab_size: 16 };
        let params = ModelParams::<f64>::init(2, dims).unwrap();
        let records: Vec<PairRecord> = images.iter().enumerate().map(|(i, img)| PairRecord {
            id: i as u64, class_id: i % 2, image: img.clone(), tokens: vec![5 + (i as u32 % 4)], caption: String::new(),
        }).collect();
        let mut shuffled = records.clone();
        shuffled.rotate_left((seed % 8) as usize);
        shuffled.reverse();
        let a = RetrievalIndex::build(&params, &PairCorpus { records }).unwrap();
        let b = RetrievalIndex::build(&params, &PairCorpus { records: shuffled }).unwrap();
        let q = [vec![5u32, 6]];
        let ra: Vec<u64> = a.retrieve(&params, &q, 8).unwrap()[0].iter().map(|r| r.0).collect();
        let rb: Vec<u64> = b.retrieve(&params, &q, 8).unwrap()[0].iter().map(|r| r.0).collect();
        prop_assert_eq!(ra, rb);
    }
}

#[test]
fn equidistant_and_identical_point_sets() {
    // every u_i orthogonal to every v_j
    let n = 4;
    let u: Vec<Vec<f64>> = (0..n).map(|i| (0..2 * n).map(|k| (k == i) as u8 as f64).collect()).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| (0..2 * n).map(|k| (k == n + i) as u8 as f64).collect()).collect();
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let l = contextual_loss(&tape, &t(&u), &t(&v), &cfg).unwrap().item();
    assert!((l - (n as f64).ln()).abs() < 1e-9);
    let same = contextual_loss(&tape, &t(&u), &t(&u), &cfg).unwrap().item();
    assert!(same <= 1e-3);
}
