//! Zero-shot classification, text-to-image retrieval, recall and a
//! deterministic 2-D principal-component projection.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::autodiff::{matmul_raw, transpose_raw, Tape, Tensor};
use crate::data::{CorpusSpec, PairCorpus, STOP_TOKENS};
use crate::encoders::{embed_images, embed_texts, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Template token sequences describing one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPrompt {
    pub class_id: usize,
    pub templates: Vec<Vec<u32>>,
}

/// Synthetic prompts shaped like the corpus captions: for class `c` and each
/// offset `t` in its token block, a template of `tokens_per_caption` tokens
/// whose class/stop mix matches the expected caption mix (class tokens
/// `c_t, c_{t+1}, ...` framed by stop tokens), the way fixed wording frames a
/// class name in a natural-language prompt. At least one class token is used.
pub fn synthetic_prompts(spec: &CorpusSpec) -> Vec<ClassPrompt> {
    let block = spec.class_token_block;
    let len = spec.tokens_per_caption.max(1);
    let expected = (len * block) as f64 / (block + STOP_TOKENS.len()) as f64;
    let n_class = (expected.round() as usize).clamp(1, len);
    let n_stop = len - n_class;
    (0..spec.n_classes)
        .map(|c| {
            let range = spec.class_tokens(c);
            let templates = (0..block)
                .map(|t| {
                    let stop = |k: usize| STOP_TOKENS[(t + k) % STOP_TOKENS.len()];
                    let lead = n_stop.div_ceil(2);
                    let mut tpl: Vec<u32> = (0..lead).map(stop).collect();
                    tpl.extend((0..n_class).map(|k| range.start + ((t + k) % block) as u32));
                    tpl.extend((lead..n_stop).map(stop));
                    tpl
                })
                .collect();
            ClassPrompt { class_id: c, templates }
        })
        .collect()
}

/// Normalized image embeddings with frozen parameters.
pub fn image_embeddings<T: Scalar>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(embed_images(&tape, &params.bind_frozen(&tape), images)?.detach())
}

/// Normalized caption embeddings with frozen parameters.
pub fn text_embeddings<T: Scalar, R: AsRef<[u32]>>(params: &ModelParams<T>, tokens: &[R]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(embed_texts(&tape, &params.bind_frozen(&tape), tokens)?.detach())
}

fn unit<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
    (norm > T::lit(1e-9)).then(|| v.iter().map(|x| *x / norm).collect())
}

/// Normalize each row, average, normalize again. A (near-)zero average has
/// no direction and is an error.
pub fn combine_template_embeddings<T: Scalar>(rows: &Tensor<T>) -> Result<Vec<T>> {
    if rows.rank() != 2 || rows.rows() == 0 {
        return Err(Error::invalid("at least one template embedding is required"));
    }
    let d = rows.cols();
    let mut acc = vec![T::zero(); d];
    for i in 0..rows.rows() {
        let u = unit(rows.row(i)).ok_or_else(|| Error::numeric("combine_template_embeddings", "zero template embedding"))?;
        acc.iter_mut().zip(u).for_each(|(a, x)| *a = *a + x);
    }
    let n = T::lit(rows.rows() as f64);
    acc.iter_mut().for_each(|a| *a = *a / n);
    unit(&acc).ok_or_else(|| Error::numeric("combine_template_embeddings", "template embeddings average to zero"))
}

/// One unit-norm row per prompt, in prompt order. Prompt `i` must describe
/// class `i`.
pub fn build_class_embeddings<T: Scalar>(params: &ModelParams<T>, prompts: &[ClassPrompt]) -> Result<Tensor<T>> {
    if prompts.is_empty() {
        return Err(Error::invalid("no class prompts"));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        if p.class_id != i {
            return Err(Error::invalid(format!("prompt {i} describes class {}; expected class {i}", p.class_id)));
        }
        if p.templates.is_empty() {
            return Err(Error::invalid(format!("class {i} has no templates")));
        }
        rows.push(combine_template_embeddings(&text_embeddings(params, &p.templates)?)?);
    }
    Tensor::from_rows(&rows)
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_desc<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Whether `truth` is among the `k` best entries of `scores`, with ties
/// broken toward the lower index.
pub fn top_k_hit<T: Scalar>(scores: &[T], truth: usize, k: usize) -> bool {
    let s = scores[truth];
    let ahead = scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < truth)).count();
    ahead < k
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top_k: f64,
    pub k: usize,
    pub predictions: Vec<usize>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Cosine scores between unit-norm `embeddings` and the directions of
/// `class_embeds`, one row per item.
fn cosine_scores<T: Scalar>(embeddings: &Tensor<T>, class_embeds: &Tensor<T>) -> Result<Tensor<T>> {
    let units: Vec<Vec<T>> = (0..class_embeds.rows())
        .map(|c| unit(class_embeds.row(c)).ok_or_else(|| Error::numeric("zero_shot_classify", format!("class {c} embedding is zero"))))
        .collect::<Result<_>>()?;
    let units = Tensor::from_rows(&units)?;
    let (n, d, c) = (embeddings.rows(), embeddings.cols(), units.rows());
    let t = transpose_raw(units.values(), c, d);
    Tensor::matrix(n, c, matmul_raw(embeddings.values(), &t, n, d, c))
}

/// Predicts the class whose embedding has the highest cosine similarity to
/// each image embedding (lowest class id on ties).
pub fn zero_shot_classify<T: Scalar>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    labels: &[usize],
    class_embeds: &Tensor<T>,
    k: usize,
) -> Result<EvalResult> {
    if class_embeds.rank() != 2 || class_embeds.cols() != params.dims.d_e {
        return Err(Error::shape(format!(
            "class embeddings have shape {:?}, expected [C, {}]",
            class_embeds.shape(),
            params.dims.d_e
        )));
    }
    if images.rank() != 2 || images.cols() != params.dims.d_img {
        return Err(Error::shape(format!("images have shape {:?}, expected [N, {}]", images.shape(), params.dims.d_img)));
    }
    let embeddings = image_embeddings(params, images)?;
    classify_embeddings(&embeddings, labels, class_embeds, k)
}

/// Zero-shot scoring on precomputed unit-norm image embeddings.
pub fn classify_embeddings<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    class_embeds: &Tensor<T>,
    k: usize,
) -> Result<EvalResult> {
    let c = class_embeds.rows();
    if k == 0 || k > c {
        return Err(Error::invalid(format!("k must be in 1..={c}, got {k}")));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::shape(format!("{} labels for {} images", labels.len(), embeddings.rows())));
    }
    if embeddings.cols() != class_embeds.cols() {
        return Err(Error::shape(format!(
            "embedding width {} differs from class embedding width {}",
            embeddings.cols(),
            class_embeds.cols()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    let scores = cosine_scores(embeddings, class_embeds)?;
    let mut confusion = vec![vec![0; c]; c];
    let (mut hit1, mut hitk) = (0usize, 0usize);
    let mut predictions = Vec::with_capacity(labels.len());
    for (i, &truth) in labels.iter().enumerate() {
        let row = scores.row(i);
        let pred = rank_desc(row)[0];
        predictions.push(pred);
        confusion[truth][pred] += 1;
        hit1 += (pred == truth) as usize;
        hitk += top_k_hit(row, truth, k) as usize;
    }
    let n = labels.len().max(1) as f64;
    Ok(EvalResult { top1: hit1 as f64 / n, top_k: hitk as f64 / n, k, predictions, confusion })
}

/// Projected, normalized image embeddings of a corpus, ready for queries.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex<T> {
    pub ids: Vec<u64>,
    pub classes: Vec<usize>,
    /// `[N, d_e]`, unit rows.
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn build(params: &ModelParams<T>, corpus: &PairCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(RetrievalIndex {
            ids: corpus.records.iter().map(|r| r.id).collect(),
            classes: corpus.records.iter().map(|r| r.class_id).collect(),
            embeddings: image_embeddings(params, &corpus.images()?)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Top-`k` `(id, cosine)` for each query embedding (unit rows), by
    /// descending score, ties by ascending id.
    pub fn search(&self, queries: &Tensor<T>, k: usize) -> Result<Vec<Vec<(u64, T)>>> {
        if k > self.len() {
            return Err(Error::invalid(format!("k = {k} exceeds index size {}", self.len())));
        }
        if queries.cols() != self.embeddings.cols() {
            return Err(Error::shape(format!(
                "query width {} differs from index width {}",
                queries.cols(),
                self.embeddings.cols()
            )));
        }
        let (q, d, n) = (queries.rows(), queries.cols(), self.len());
        let t = transpose_raw(self.embeddings.values(), n, d);
        let scores = matmul_raw(queries.values(), &t, q, d, n);
        Ok((0..q)
            .map(|i| {
                let row = &scores[i * n..(i + 1) * n];
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(self.ids[a].cmp(&self.ids[b]))
                });
                order.into_iter().take(k).map(|j| (self.ids[j], row[j])).collect()
            })
            .collect())
    }

    /// Ranks the indexed images for each caption.
    pub fn retrieve<R: AsRef<[u32]>>(
        &self,
        params: &ModelParams<T>,
        queries: &[R],
        k: usize,
    ) -> Result<Vec<Vec<(u64, T)>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        self.search(&text_embeddings(params, queries)?, k)
    }
}

/// Ranks every image of `corpus` against one caption.
pub fn retrieve<T: Scalar>(
    params: &ModelParams<T>,
    query_tokens: &[u32],
    corpus: &PairCorpus,
    k: usize,
) -> Result<Vec<(u64, T)>> {
    let index = RetrievalIndex::build(params, corpus)?;
    Ok(index.retrieve(params, &[query_tokens], k)?.remove(0))
}

/// Fraction of queries whose first `k` ranked ids contain a relevant id.
pub fn recall_at_k(rankings: &[Vec<u64>], truth: &[BTreeSet<u64>], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(Error::shape(format!("{} rankings for {} truth sets", rankings.len(), truth.len())));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("recall needs at least one query"));
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r.iter().take(k).any(|id| t.contains(id))).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Which images count as correct answers to a caption query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    /// Only the caption's own image.
    SamePair,
    /// Every image of the caption's class.
    SameClass,
}

/// Text-to-image recall@k using every caption of `corpus` as a query against
/// every image of `corpus`.
pub fn text_to_image_recall<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &PairCorpus,
    k: usize,
    relevance: Relevance,
) -> Result<f64> {
    let index = RetrievalIndex::build(params, corpus)?;
    let queries: Vec<&[u32]> = corpus.records.iter().map(|r| r.tokens.as_slice()).collect();
    let rankings: Vec<Vec<u64>> =
        index.retrieve(params, &queries, k)?.into_iter().map(|r| r.into_iter().map(|(id, _)| id).collect()).collect();
    let truth: Vec<BTreeSet<u64>> = corpus
        .records
        .iter()
        .map(|q| match relevance {
            Relevance::SamePair => BTreeSet::from([q.id]),
            Relevance::SameClass => corpus.records.iter().filter(|r| r.class_id == q.class_id).map(|r| r.id).collect(),
        })
        .collect();
    recall_at_k(&rankings, &truth, k)
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Leading principal directions of the rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Principal<T> {
    pub mean: Vec<T>,
    /// Unit eigenvectors of the sample covariance, by decreasing eigenvalue.
    pub components: Vec<Vec<T>>,
    pub eigenvalues: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn mat_vec<T: Scalar>(m: &[T], v: &[T]) -> Vec<T> {
    m.chunks(v.len()).map(|row| dot(row, v)).collect()
}

/// Removes the components along `basis` (unit vectors) from `v`.
fn orthogonalize<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x = *x - p * *y);
    }
}

/// Makes the first entry that is not negligible positive.
fn fix_sign<T: Scalar>(v: &mut [T]) {
    let cutoff = T::lit(1e-12);
    if let Some(first) = v.iter().find(|x| x.abs() > cutoff) {
        if *first < T::zero() {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Top-`n` eigenpairs of the sample covariance by power iteration with
/// deflation, starting each search from the normalized all-ones vector.
pub fn principal_components<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Principal<T>> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::invalid(format!("principal components need at least 2 rows, got shape {:?}", x.shape())));
    }
    let (rows, d) = (x.rows(), x.cols());
    let mut mean = vec![T::zero(); d];
    for i in 0..rows {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m = *m + *v);
    }
    mean.iter_mut().for_each(|m| *m = *m / T::lit(rows as f64));
    let centered: Vec<T> = (0..rows).flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| *v - *m).collect::<Vec<_>>()).collect();
    let t = transpose_raw(&centered, rows, d);
    let denom = T::lit((rows - 1) as f64);
    let mut cov: Vec<T> = matmul_raw(&t, &centered, d, rows, d).into_iter().map(|v| v / denom).collect();

    let tol = T::lit(POWER_TOL);
    let mut components: Vec<Vec<T>> = Vec::new();
    let mut eigenvalues = Vec::new();
    for _ in 0..n.min(d) {
        let start = T::one() / T::lit(d as f64).sqrt();
        let mut v = vec![start; d];
        orthogonalize(&mut v, &components);
        let mut v = unit(&v).unwrap_or_else(|| fallback_direction(d, &components));
        let mut lambda = T::zero();
        for _ in 0..POWER_MAX_ITER {
            let w = mat_vec(&cov, &v);
            lambda = dot(&v, &w);
            let Some(next) = unit(&w) else {
                // Remaining spectrum is (numerically) zero: any orthogonal
                // direction is an eigenvector.
                lambda = T::zero();
                v = fallback_direction(d, &components);
                break;
            };
            let change = next.iter().zip(&v).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max);
            v = next;
            if change < tol {
                break;
            }
        }
        fix_sign(&mut v);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = cov[i * d + j] - lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    Ok(Principal { mean, components, eigenvalues })
}

/// First standard basis vector with a usable component orthogonal to `basis`.
fn fallback_direction<T: Scalar>(d: usize, basis: &[Vec<T>]) -> Vec<T> {
    (0..d)
        .find_map(|i| {
            let mut e = vec![T::zero(); d];
            e[i] = T::one();
            orthogonalize(&mut e, basis);
            unit(&e).map(|mut u| {
                orthogonalize(&mut u, basis);
                unit(&u).unwrap_or(u)
            })
        })
        .unwrap_or_else(|| vec![T::zero(); d])
}

/// Coordinates of the mean-centered rows of `x` along the top two principal
/// directions. Data with a single column gets a zero second coordinate.
pub fn project_2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let pc = principal_components(x, 2)?;
    let mut out = Vec::with_capacity(x.rows() * 2);
    for i in 0..x.rows() {
        let c: Vec<T> = x.row(i).iter().zip(&pc.mean).map(|(v, m)| *v - *m).collect();
        for k in 0..2 {
            out.push(pc.components.get(k).map_or(T::zero(), |v| dot(&c, v)));
        }
    }
    Tensor::matrix(x.rows(), 2, out)
}

/// `metric,value` table.
pub fn metrics_csv<T: std::fmt::Display>(rows: &[(&str, T)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, v) in rows {
        let _ = writeln!(out, "{name},{v}");
    }
    out
}

/// `id,class,x,y` table for plotting a 2-D projection.
pub fn projection_csv<T: Scalar>(ids: &[u64], classes: &[usize], coords: &Tensor<T>) -> Result<String> {
    if ids.len() != coords.rows() || classes.len() != coords.rows() || coords.cols() != 2 {
        return Err(Error::shape(format!(
            "{} ids and {} classes for coordinates of shape {:?}",
            ids.len(),
            classes.len(),
            coords.shape()
        )));
    }
    let mut out = String::from("id,class,x,y\n");
    for i in 0..coords.rows() {
        let _ = writeln!(out, "{},{},{},{}", ids[i], classes[i], coords.at(i, 0), coords.at(i, 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, CorpusSpec};
    use crate::encoders::ModelDims;

    fn small() -> (ModelParams<f64>, PairCorpus) {
        let dims = ModelDims { d_img: 16, d_hid: 16, d_i: 16, d_emb: 8, d_t: 8, d_e: 8, vocab_size: 32 };
        let spec = CorpusSpec { n_classes: 4, n_pairs: 24, d_img: 16, vocab_size: 32, class_token_block: 4, ..CorpusSpec::default() };
        (ModelParams::init(11, dims).unwrap(), generate(&spec).unwrap())
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        assert_eq!(rank_desc(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
        assert!(top_k_hit(&[0.5, 0.5], 0, 1));
        assert!(!top_k_hit(&[0.5, 0.5], 1, 1));
        assert!(top_k_hit(&[0.5, 0.5], 1, 2));
    }

    #[test]
    fn orthogonal_classes_perfect_top1() {
        let class_embeds = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let emb = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let r = classify_embeddings(&emb, &[0, 1, 1], &class_embeds, 1).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![0, 2]]);
        let all = classify_embeddings(&emb, &[1, 0, 0], &class_embeds, 2).unwrap();
        assert_eq!(all.top_k, 1.0);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let c = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(classify_embeddings(&c, &[0], &c, 2).is_err());
        assert!(classify_embeddings(&c, &[0], &c, 0).is_err());
    }

    #[test]
    fn opposite_templates_are_an_error() {
        let rows = Tensor::from_rows(&[[1.0, 2.0], [-1.0, -2.0]]).unwrap();
        assert!(combine_template_embeddings(&rows).is_err());
        let single = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(combine_template_embeddings(&single).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn duplicated_template_changes_nothing() {
        let (params, _) = small();
        let once = vec![ClassPrompt { class_id: 0, templates: vec![vec![1, 5, 6, 2]] }];
        let twice = vec![ClassPrompt { class_id: 0, templates: vec![vec![1, 5, 6, 2], vec![1, 5, 6, 2]] }];
        let a = build_class_embeddings(&params, &once).unwrap();
        let b = build_class_embeddings(&params, &twice).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        let empty = vec![ClassPrompt { class_id: 0, templates: vec![] }];
        assert!(build_class_embeddings(&params, &empty).is_err());
    }

    #[test]
    fn synthetic_prompts_use_class_block() {
        // 6 tokens, block 8 of 12 choices: 4 class tokens framed by 2 stops.
        let spec = CorpusSpec { n_classes: 2, ..CorpusSpec::default() };
        let p = synthetic_prompts(&spec);
        assert_eq!(p[1].templates.len(), 8);
        assert_eq!(p[1].templates[7], vec![4, 20, 13, 14, 15, 1]);
        let tiny = CorpusSpec { n_classes: 1, tokens_per_caption: 1, class_token_block: 1, ..CorpusSpec::default() };
        assert_eq!(synthetic_prompts(&tiny)[0].templates, vec![vec![5]]);
    }

    #[test]
    fn retrieval_basics() {
        let (params, corpus) = small();
        let (one, _) = corpus.split_at(1);
        let r = retrieve(&params, &corpus.records[3].tokens, &one, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, 0);
        assert!(retrieve(&params, &[1, 2], &corpus, 0).unwrap().is_empty());
        assert!(retrieve(&params, &[1, 2], &corpus, 25).is_err());
        assert!(matches!(retrieve(&params, &[1, 2], &PairCorpus::default(), 0), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn recall_examples() {
        let truth: Vec<BTreeSet<u64>> = vec![BTreeSet::from([1]), BTreeSet::from([2])];
        assert_eq!(recall_at_k(&[vec![1, 2], vec![2, 1]], &truth, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[vec![3], vec![4]], &truth, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[vec![1, 2], vec![1, 3]], &truth, 2).unwrap(), 0.5);
        assert!(recall_at_k(&[vec![1]], &truth, 1).is_err());
    }

    #[test]
    fn collinear_points_have_no_second_coordinate() {
        let x = Tensor::<f64>::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.5, -3.0, -4.5]]).unwrap();
        let p = project_2d(&x).unwrap();
        for i in 0..4 {
            assert!(p.at(i, 1).abs() < 1e-8);
        }
    }

    #[test]
    fn two_dimensional_data_keeps_distances() {
        let x = Tensor::<f64>::from_rows(&[[1.0, 0.5], [-2.0, 0.3], [0.5, -1.0], [0.5, 0.2]]).unwrap();
        let p = project_2d(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((x.at(i, 0) - x.at(j, 0)).powi(2) + (x.at(i, 1) - x.at(j, 1)).powi(2)).sqrt();
                let d1 = ((p.at(i, 0) - p.at(j, 0)).powi(2) + (p.at(i, 1) - p.at(j, 1)).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-8);
            }
        }
        assert!(project_2d(&Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).is_err());
    }

    #[test]
    fn csv_writers() {
        assert_eq!(metrics_csv(&[("top1", 0.5)]), "metric,value\ntop1,0.5\n");
        let coords = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(projection_csv(&[4], &[1], &coords).unwrap(), "id,class,x,y\n4,1,1,-2\n");
    }
}
