//! Corpus and checkpoint files survive save/load bit-for-bit.

use std::path::Path;

use ctxclip::data::{generate, CorpusSpec, PairCorpus};
use ctxclip::encoders::{ModelDims, ModelParams};
use ctxclip::trainer::{train, Checkpoint, ClassifierHead, EpochLoss, TrainConfig};
use ctxclip::{autodiff::Tensor, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_spec(rng: &mut ChaCha8Rng) -> CorpusSpec {
    let n_classes = rng.gen_range(1..=6);
    let block = rng.gen_range(1..=4);
    CorpusSpec {
        n_classes,
        n_pairs: rng.gen_range(1..=40),
        d_img: rng.gen_range(1..=12),
        vocab_size: 5 + n_classes * block + rng.gen_range(0..8),
        tokens_per_caption: rng.gen_range(1..=8),
        class_token_block: block,
        noise_sigma: if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) },
        seed: rng.gen(),
    }
}

#[test]
fn corpus_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let corpus = generate(&random_spec(&mut rng)).unwrap();
        let path = dir.path().join(format!("c{case}.jsonl"));
        corpus.save(&path).unwrap();
        let back = PairCorpus::load(&path).unwrap();
        assert_eq!(back, corpus);
        for (a, b) in corpus.records.iter().zip(&back.records) {
            assert_eq!(bits(&a.image), bits(&b.image));
        }
    }
}

#[test]
fn corpus_lines_have_fixed_field_order() {
    let spec = CorpusSpec { n_pairs: 3, ..CorpusSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    generate(&spec).unwrap().save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let keys = ["\"id\":", "\"class\":", "\"image\":", "\"tokens\":", "\"caption\":"];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
    }
}

#[test]
fn corpus_parse_errors_name_the_line() {
    let spec = CorpusSpec { n_pairs: 3, ..CorpusSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    generate(&spec).unwrap().save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[2][..lines[2].len() / 2];
    lines[2] = cut;
    match PairCorpus::parse(&lines.join("\n"), Path::new("x")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(PairCorpus::parse("", Path::new("x")).unwrap().is_empty());
    assert!(matches!(PairCorpus::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint<f64> {
    let dims = ModelDims {
        d_img: rng.gen_range(1..6),
        d_hid: rng.gen_range(1..6),
        d_i: rng.gen_range(1..6),
        d_emb: rng.gen_range(1..6),
        d_t: rng.gen_range(1..6),
        d_e: rng.gen_range(1..6),
        vocab_size: rng.gen_range(1..10),
    };
    let mut config = TrainConfig::<f64> { epochs: rng.gen_range(0..100), seed: rng.gen(), ..TrainConfig::default() };
    config.lr_image = rng.gen();
    config.loss.h = rng.gen_range(0.01..2.0);
    let params = ModelParams::init(rng.gen(), dims).unwrap();
    let history = (0..rng.gen_range(0..4))
        .map(|epoch| EpochLoss { epoch, total: rng.gen(), contrastive: rng.gen(), contextual: rng.gen() })
        .collect();
    let head = rng.gen_bool(0.5).then(|| {
        let c = rng.gen_range(1..5);
        ClassifierHead {
            weight: Tensor::matrix(dims.d_e, c, (0..dims.d_e * c).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap(),
            bias: Tensor::matrix(1, c, (0..c).map(|_| rng.gen::<f64>() * 1e-300).collect()).unwrap(),
        }
    });
    Checkpoint { params, config, epoch: rng.gen_range(0..50), history, head }
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..20 {
        let ckpt = random_checkpoint(&mut rng);
        let path = dir.path().join(format!("k{case}.txt"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, ckpt, "case {case}");
        for ((_, a), (_, b)) in ckpt.params.layers.iter().zip(back.params.layers.iter()) {
            assert_eq!(bits(a.values()), bits(b.values()));
        }
        assert_eq!(back.to_text(), ckpt.to_text());
    }
}

#[test]
fn trained_checkpoint_reproduces_its_state() {
    let spec = CorpusSpec { n_pairs: 64, ..CorpusSpec::default() };
    let corpus = generate(&spec).unwrap();
    let dims = ModelDims { d_img: spec.d_img, vocab_size: spec.vocab_size, ..ModelDims::default() };
    let cfg = TrainConfig::<f64> { epochs: 2, ..TrainConfig::default() };
    let (ckpt, _) = train(&cfg, &corpus, &ModelParams::init(7, dims).unwrap()).unwrap();
    let back = Checkpoint::<f64>::parse(&ckpt.to_text(), Path::new("k")).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ckpt = random_checkpoint(&mut ChaCha8Rng::seed_from_u64(1));
    let text = ckpt.to_text();
    assert!(Checkpoint::<f64>::parse("", Path::new("k")).is_err());
    let cut = &text[..text.len() / 2];
    assert!(matches!(Checkpoint::<f64>::parse(cut, Path::new("k")), Err(Error::Parse { .. })));
    let bumped = text.replacen("format_version=1", "format_version=2", 1);
    assert!(matches!(Checkpoint::<f64>::parse(&bumped, Path::new("k")), Err(Error::Version { .. })));
}
