//! Supervised fine-tuning with a linear classifier on image embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{epoch_seed, Checkpoint, ClassifierHead, ModelOptimizer, TrainConfig};
use super::adam::{adam_step, AdamState};
use crate::autodiff::{Axis, Tape, Tensor};
use crate::data::{batch_iter, PairCorpus, PairRecord};
use crate::encoders::{embed_images, Layers, ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::eval::top_k_hit;
use crate::scalar::Scalar;

/// Offset mixed into the training seed for the split and head init, so they
/// do not share a stream with minibatch shuffling.
const SPLIT_SALT: u64 = 0x5EED_0F5B_17;
const HEAD_SALT: u64 = 0x5EED_0F4E_AD;

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneReport<T> {
    /// Accuracy on the held-out test split.
    pub top1: f64,
    pub top5: f64,
    pub val_top1: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Mean cross-entropy per epoch.
    pub losses: Vec<T>,
}

/// Seeded 80/10/10 train/validation/test partition of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    (order, val, test)
}

fn init_head<T: Scalar>(d_e: usize, n_classes: usize, seed: u64) -> Result<ClassifierHead<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SALT);
    let limit = (6.0 / (d_e + n_classes) as f64).sqrt();
    let weight = (0..d_e * n_classes).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
    Ok(ClassifierHead { weight: Tensor::matrix(d_e, n_classes, weight)?, bias: Tensor::zeros(&[1, n_classes]) })
}

/// Class scores `emb · W + b` for a batch of images.
fn logits<T: Scalar>(
    tape: &Tape<T>,
    bound: &Layers<Tensor<T>>,
    head: (&Tensor<T>, &Tensor<T>),
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let emb = embed_images(tape, bound, images)?;
    tape.add(&tape.matmul(&emb, head.0)?, head.1)
}

/// Mean softmax cross-entropy; `targets` is a one-hot constant.
fn cross_entropy<T: Scalar>(tape: &Tape<T>, logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    let m = tape.constant(&tape.max(logits, Axis::PerRow)?.detach());
    let shifted = tape.sub(logits, &m)?;
    let lse = tape.log(&tape.sum(&tape.exp(&shifted)?, Axis::PerRow)?)?;
    let picked = tape.sum(&tape.mul(&shifted, targets)?, Axis::PerRow)?;
    tape.mean(&tape.sub(&lse, &picked)?, Axis::All)
}

fn one_hot<T: Scalar>(classes: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    let mut v = vec![T::zero(); classes.len() * n_classes];
    for (i, &c) in classes.iter().enumerate() {
        v[i * n_classes + c] = T::one();
    }
    Tensor::matrix(classes.len(), n_classes, v)
}

/// Top-1 and top-`k` accuracy of the classifier on `records`.
fn accuracy<T: Scalar>(
    params: &ModelParams<T>,
    head: &ClassifierHead<T>,
    records: &[&PairRecord],
    k: usize,
) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Ok((0.0, 0.0));
    }
    let split = PairCorpus { records: records.iter().map(|r| (*r).clone()).collect() };
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let scores = logits(&tape, &bound, (&head.weight, &head.bias), &split.images()?)?;
    let (mut hit1, mut hitk) = (0usize, 0usize);
    for (i, r) in records.iter().enumerate() {
        hit1 += top_k_hit(scores.row(i), r.class_id, 1) as usize;
        hitk += top_k_hit(scores.row(i), r.class_id, k) as usize;
    }
    let n = records.len() as f64;
    Ok((hit1 as f64 / n, hitk as f64 / n))
}

/// Attaches (or reuses) a linear head `d_e -> n_classes` on the normalized
/// image embeddings and trains image encoder, image projection and head
/// end-to-end with softmax cross-entropy on the 80% train split. Text-side
/// arrays are left untouched. Accuracy is reported on the 10% test split.
pub fn fine_tune<T: Scalar>(
    ckpt: &Checkpoint<T>,
    labeled: &PairCorpus,
    n_classes: usize,
    cfg: &TrainConfig<T>,
) -> Result<(Checkpoint<T>, FineTuneReport<T>)> {
    cfg.validate()?;
    ckpt.params.validate()?;
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be positive"));
    }
    if labeled.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(r) = labeled.records.iter().find(|r| r.class_id >= n_classes) {
        return Err(Error::invalid(format!(
            "record {} has class {} but only {n_classes} classes are configured",
            r.id, r.class_id
        )));
    }
    let d_e = ckpt.params.dims.d_e;
    if labeled.image_width() != Some(ckpt.params.dims.d_img) {
        return Err(Error::shape(format!(
            "corpus images have width {:?}, model expects {}",
            labeled.image_width(),
            ckpt.params.dims.d_img
        )));
    }

    let (train_idx, val_idx, test_idx) = split_indices(labeled.len(), cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &labeled.records[i]).collect::<Vec<_>>();
    let train_split = PairCorpus { records: pick(&train_idx).into_iter().cloned().collect() };

    let mut params = ckpt.params.clone();
    let mut head = match &ckpt.head {
        Some(h) if h.n_classes() == n_classes && h.weight.rows() == d_e => h.clone(),
        _ => init_head(d_e, n_classes, cfg.seed)?,
    };
    let mut optimizer = ModelOptimizer::new(&params.layers);
    let mut head_states = (AdamState::new(head.weight.len()), AdamState::new(head.bias.len()));
    let mut losses = Vec::new();

    for epoch in 1..=cfg.epochs {
        if train_split.is_empty() {
            break;
        }
        let batches = batch_iter(&train_split, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?;
        let mut sum = T::zero();
        for (b, batch) in batches.iter().enumerate() {
            let wrap = |e: Error| Error::Training { epoch, batch: b, source: Box::new(e) };
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let (w, bias) = (tape.leaf(&head.weight), tape.leaf(&head.bias));
            let step = (|| {
                let scores = logits(&tape, &bound, (&w, &bias), &batch.images()?)?;
                let loss = cross_entropy(&tape, &scores, &one_hot(&batch.classes(), n_classes)?)?;
                let grads = tape.backward(&loss)?;
                let layer_grads = bound.try_map(|_, leaf| grads.wrt(leaf).map(<[T]>::to_vec))?;
                Ok::<_, Error>((loss.item(), layer_grads, grads.wrt(&w)?.to_vec(), grads.wrt(&bias)?.to_vec()))
            })();
            let (loss, layer_grads, gw, gb) = step.map_err(wrap)?;
            let mut update = || {
                optimizer.step(
                    &mut params.layers,
                    &layer_grads,
                    |name| match Layers::<()>::group_of(name) {
                        ParamGroup::Image => Some(cfg.lr_image),
                        ParamGroup::Text => None,
                    },
                    cfg.weight_decay,
                    cfg.decoupled_weight_decay,
                )?;
                let mut wv = head.weight.to_vec();
                adam_step(&mut wv, &gw, &mut head_states.0, cfg.lr_head, cfg.weight_decay, cfg.decoupled_weight_decay)?;
                let mut bv = head.bias.to_vec();
                adam_step(&mut bv, &gb, &mut head_states.1, cfg.lr_head, cfg.weight_decay, cfg.decoupled_weight_decay)?;
                head = ClassifierHead { weight: Tensor::matrix(d_e, n_classes, wv)?, bias: Tensor::matrix(1, n_classes, bv)? };
                Ok::<_, Error>(())
            };
            update().map_err(wrap)?;
            sum = sum + loss;
        }
        losses.push(sum / T::lit(batches.len() as f64));
    }

    let k = n_classes.min(5);
    let (top1, top5) = accuracy(&params, &head, &pick(&test_idx), k)?;
    let (val_top1, _) = accuracy(&params, &head, &pick(&val_idx), k)?;
    let report = FineTuneReport {
        top1,
        top5,
        val_top1,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        n_test: test_idx.len(),
        losses,
    };
    let out = Checkpoint {
        params,
        config: *cfg,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        head: Some(head),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, CorpusSpec};
    use crate::encoders::ModelDims;

    fn small_dims() -> ModelDims {
        ModelDims { d_img: 16, d_hid: 16, d_i: 16, d_emb: 8, d_t: 8, d_e: 8, vocab_size: 32 }
    }

    fn corpus(n_classes: usize, n_pairs: usize, sigma: f64) -> PairCorpus {
        let spec = CorpusSpec { n_classes, n_pairs, d_img: 16, vocab_size: 32, class_token_block: 2, noise_sigma: sigma, ..CorpusSpec::default() };
        generate(&spec).unwrap()
    }

    fn start(dims: ModelDims) -> Checkpoint<f64> {
        Checkpoint {
            params: ModelParams::init(3, dims).unwrap(),
            config: TrainConfig::default(),
            epoch: 0,
            history: vec![],
            head: None,
        }
    }

    #[test]
    fn split_is_80_10_10_and_a_partition() {
        let (a, b, c) = split_indices(100, 7);
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 7), (a, b, c));
    }

    #[test]
    fn single_class_is_perfect() {
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let (_, rep) = fine_tune(&start(small_dims()), &corpus(1, 20, 0.1), 1, &cfg).unwrap();
        assert_eq!(rep.top1, 1.0);
        assert_eq!(rep.top5, 1.0);
    }

    #[test]
    fn class_overflow_is_an_error() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let err = fine_tune(&start(small_dims()), &corpus(4, 20, 0.1), 3, &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn text_arrays_are_untouched() {
        let ck = start(small_dims());
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let (out, rep) = fine_tune(&ck, &corpus(4, 40, 0.1), 4, &cfg).unwrap();
        assert_eq!(out.params.layers.text_embed, ck.params.layers.text_embed);
        assert_eq!(out.params.layers.text_w, ck.params.layers.text_w);
        assert_eq!(out.params.layers.proj_text, ck.params.layers.proj_text);
        assert_ne!(out.params.layers.image_w1, ck.params.layers.image_w1);
        assert_eq!(rep.losses.len(), 2);
        assert!(out.head.is_some());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::<f64>::new();
        let z = Tensor::from_rows(&[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]).unwrap();
        let y = one_hot::<f64>(&[1, 0], 3).unwrap();
        let got = cross_entropy(&tape, &tape.leaf(&z), &y).unwrap().item();
        let row = |r: &[f64], c: usize| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[c];
        let want = (row(&[1.0, 2.0, 0.5], 1) + row(&[0.0, -1.0, 3.0], 0)) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }
}
