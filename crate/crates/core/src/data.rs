//! Deterministic synthetic image/caption corpora with known class structure.
//!
//! Token layout: id 0 is padding, ids `1..=4` are stop tokens shared by every
//! class, and class `c` owns the block
//! `5 + c * class_token_block .. 5 + (c + 1) * class_token_block`.
//!
//! Generation draws from a ChaCha8 stream seeded with `seed`: first one
//! prototype per class, then for each pair (in id order) its image noise and
//! its caption tokens. Normals come from the Box-Muller cosine branch,
//! `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` with `u1, u2` uniform in `[0, 1)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const STOP_TOKENS: [u32; 4] = [1, 2, 3, 4];
/// Padding plus the stop-token pool.
pub const RESERVED_TOKENS: usize = 1 + STOP_TOKENS.len();

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub n_pairs: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub tokens_per_caption: usize,
    pub class_token_block: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_classes: 8,
            n_pairs: 640,
            d_img: 64,
            vocab_size: 128,
            tokens_per_caption: 6,
            class_token_block: 8,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.d_img == 0 || self.tokens_per_caption == 0 || self.class_token_block == 0 {
            return Err(Error::invalid("n_classes, d_img, tokens_per_caption and class_token_block must be >= 1"));
        }
        if self.n_classes * self.class_token_block + RESERVED_TOKENS > self.vocab_size {
            return Err(Error::invalid(format!(
                "{} classes x {} tokens + {} reserved exceeds vocabulary of {}",
                self.n_classes, self.class_token_block, RESERVED_TOKENS, self.vocab_size
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn class_tokens(&self, class: usize) -> Range<u32> {
        class_token_range(class, self.class_token_block)
    }
}

pub fn class_token_range(class: usize, block: usize) -> Range<u32> {
    let start = RESERVED_TOKENS + class * block;
    start as u32..(start + block) as u32
}

/// One image/caption pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: u64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub image: Vec<f64>,
    pub tokens: Vec<u32>,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairCorpus {
    pub records: Vec<PairRecord>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Unit-norm class prototypes, as drawn at the start of [`generate`].
pub fn prototypes(spec: &CorpusSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_prototypes(spec, &mut rng))
}

fn draw_prototypes(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..spec.n_classes).map(|_| normalize((0..spec.d_img).map(|_| gaussian(rng)).collect())).collect()
}

pub fn caption_text(class_id: usize, tokens: &[u32]) -> String {
    let words: Vec<String> = tokens.iter().map(|t| format!("w{t}")).collect();
    format!("class {class_id}: {}", words.join(" "))
}

/// Builds a corpus; classes are assigned round-robin by pair id.
pub fn generate(spec: &CorpusSpec) -> Result<PairCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = draw_prototypes(spec, &mut rng);
    let block = spec.class_token_block;
    let mut records = Vec::with_capacity(spec.n_pairs);
    for id in 0..spec.n_pairs {
        let class_id = id % spec.n_classes;
        let image = if spec.noise_sigma == 0.0 {
            protos[class_id].clone()
        } else {
            normalize(protos[class_id].iter().map(|p| p + spec.noise_sigma * gaussian(&mut rng)).collect())
        };
        let class_range = spec.class_tokens(class_id);
        let tokens: Vec<u32> = (0..spec.tokens_per_caption)
            .map(|_| {
                let k = rng.gen_range(0..block + STOP_TOKENS.len());
                if k < block {
                    class_range.start + k as u32
                } else {
                    STOP_TOKENS[k - block]
                }
            })
            .collect();
        let caption = caption_text(class_id, &tokens);
        records.push(PairRecord { id: id as u64, class_id, image, tokens, caption });
    }
    Ok(PairCorpus { records })
}

impl PairCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Image width shared by all records (`None` when empty).
    pub fn image_width(&self) -> Option<usize> {
        self.records.first().map(|r| r.image.len())
    }

    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    /// First `n` records and the rest.
    pub fn split_at(&self, n: usize) -> (PairCorpus, PairCorpus) {
        let n = n.min(self.records.len());
        (
            PairCorpus { records: self.records[..n].to_vec() },
            PairCorpus { records: self.records[n..].to_vec() },
        )
    }

    pub fn images<T: Scalar>(&self) -> Result<Tensor<T>> {
        images_tensor(self.records.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses line-delimited records; `origin` is used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records: Vec<PairRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
            if line.trim().is_empty() {
                return Err(err("blank line".into()));
            }
            let rec: PairRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if let Some(w) = records.first().map(|r| r.image.len()) {
                if rec.image.len() != w {
                    return Err(err(format!("image has {} values, expected {w}", rec.image.len())));
                }
            }
            records.push(rec);
        }
        Ok(PairCorpus { records })
    }
}

pub(crate) fn images_tensor<'a, T: Scalar>(records: impl Iterator<Item = &'a PairRecord>) -> Result<Tensor<T>> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for r in records {
        match width {
            None => width = Some(r.image.len()),
            Some(w) if w != r.image.len() => return Err(Error::shape("ragged image widths")),
            _ => {}
        }
        values.extend(r.image.iter().map(|v| T::lit(*v)));
        rows += 1;
    }
    Tensor::matrix(rows, width.unwrap_or(0), values)
}

/// A minibatch; pair `(i, i)` is the positive, every other pairing a negative.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub records: Vec<&'a PairRecord>,
}

impl<'a> PairBatch<'a> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    pub fn images<T: Scalar>(&self) -> Result<Tensor<T>> {
        images_tensor(self.records.iter().copied())
    }

    pub fn tokens(&self) -> Vec<&'a [u32]> {
        self.records.iter().map(|r| r.tokens.as_slice()).collect()
    }
}

/// Partitions the corpus into batches of `batch_size` (last one may be short).
/// With `shuffle`, the order is a ChaCha8 shuffle seeded by `seed`.
pub fn batch_iter(corpus: &PairCorpus, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<PairBatch<'_>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| PairBatch { records: chunk.iter().map(|&i| &corpus.records[i]).collect() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_pairs: usize) -> CorpusSpec {
        CorpusSpec { n_pairs, ..CorpusSpec::default() }
    }

    #[test]
    fn empty_corpus() {
        assert!(generate(&spec(0)).unwrap().is_empty());
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&spec(50)).unwrap(), generate(&spec(50)).unwrap());
        let other = generate(&CorpusSpec { seed: 8, ..spec(50) }).unwrap();
        assert_ne!(generate(&spec(50)).unwrap(), other);
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let s = CorpusSpec { noise_sigma: 0.0, ..spec(40) };
        let protos = prototypes(&s).unwrap();
        for r in generate(&s).unwrap().records {
            assert_eq!(r.image, protos[r.class_id]);
        }
    }

    #[test]
    fn round_robin_and_token_blocks() {
        let s = spec(33);
        for r in generate(&s).unwrap().records {
            assert_eq!(r.class_id, r.id as usize % s.n_classes);
            let block = s.class_tokens(r.class_id);
            assert!(r.tokens.iter().all(|t| block.contains(t) || STOP_TOKENS.contains(t)));
            assert_eq!(r.tokens.len(), s.tokens_per_caption);
            let norm: f64 = r.image.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vocabulary_too_small() {
        assert!(generate(&CorpusSpec { vocab_size: 60, ..spec(4) }).is_err());
    }

    #[test]
    fn prototypes_well_separated() {
        let p = prototypes(&CorpusSpec::default()).unwrap();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let c: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                assert!(c.abs() < 0.5, "prototypes {i},{j}: {c}");
            }
        }
    }

    #[test]
    fn batches_sizes_and_order() {
        let c = generate(&spec(10)).unwrap();
        let b = batch_iter(&c, 4, 0, false).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let ids: Vec<u64> = b.iter().flat_map(|x| x.ids()).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffled_batches_repeatable() {
        let c = generate(&spec(40)).unwrap();
        let ids = |seed| -> Vec<u64> { batch_iter(&c, 8, seed, true).unwrap().iter().flat_map(|b| b.ids()).collect() };
        assert_eq!(ids(3), ids(3));
        assert_ne!(ids(3), ids(4));
        let mut sorted = ids(3);
        sorted.sort();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_size() {
        assert!(batch_iter(&PairCorpus::default(), 0, 0, false).is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let c = generate(&spec(2)).unwrap();
        let good = serde_json::to_string(&c.records[0]).unwrap();
        let text = format!("{good}\n{}\n", &good[..good.len() / 2]);
        match PairCorpus::parse(&text, Path::new("x.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(PairCorpus::parse(&format!("{good}\n\n{good}\n"), Path::new("x")), Err(Error::Parse { line: 2, .. })));
        assert!(PairCorpus::parse("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn record_field_order() {
        let c = generate(&spec(1)).unwrap();
        let line = serde_json::to_string(&c.records[0]).unwrap();
        let pos = |k: &str| line.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("id") < pos("class") && pos("class") < pos("image"));
        assert!(pos("image") < pos("tokens") && pos("tokens") < pos("caption"));
    }
}
