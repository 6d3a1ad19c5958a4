//! Alignment objectives: bidirectional contrastive loss, the contextual
//! (nearest-neighbour field) similarity between two point sets, and their
//! weighted sum.
//!
//! Conventions used throughout: row `i` of every `N x N` matrix is image
//! `i`, column `j` is text `j`. Pair `(i, i)` is the positive.

use std::fmt::Write as _;

use crate::autodiff::{Axis, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig<T> {
    /// Softmax temperature of the contrastive term.
    pub tau: T,
    /// Weight of the image-to-text direction; text-to-image gets `1 - lambda_w`.
    pub lambda_w: T,
    /// Weight of the contextual term in the total.
    pub alpha: T,
    /// Bandwidth of the exponential affinity.
    pub h: T,
    /// Stabilizer in the distance normalization.
    pub eps: T,
    /// Average `CX(U,V)` and `CX(V,U)` instead of using one direction.
    pub symmetric_contextual: bool,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            tau: T::one(),
            lambda_w: T::lit(0.75),
            alpha: T::lit(0.5),
            h: T::lit(0.5),
            eps: T::lit(1e-5),
            symmetric_contextual: false,
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > T::zero()
            && self.lambda_w >= T::zero()
            && self.lambda_w <= T::one()
            && self.alpha >= T::zero()
            && self.h > T::zero()
            && self.eps > T::zero()
            && self.tau.is_finite()
            && self.alpha.is_finite()
            && self.h.is_finite()
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss config out of range: tau={} lambda={} alpha={} h={} eps={}",
                self.tau, self.lambda_w, self.alpha, self.h, self.eps
            )))
        }
    }
}

/// Scalar parts of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub contrastive: T,
    pub contextual: T,
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match (a.shape(), b.shape()) {
        ([n, d], [n2, d2]) if n == n2 && d == d2 => Ok((*n, *d)),
        (sa, sb) => Err(Error::shape(format!("{what}: operands {sa:?} and {sb:?} do not match"))),
    }
}

/// `[N, 1]` Euclidean norms of the rows of `x`.
fn row_norms<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sq = tape.mul(x, x)?;
    tape.sqrt(&tape.sum(&sq, Axis::PerRow)?)
}

/// Entry `(i, k)` is the cosine of row `i` of `a` and row `k` of `b`.
pub fn cosine_similarity_matrix<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "cosine similarity needs matrices of equal width, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let dots = tape.matmul(a, &tape.transpose(b)?)?;
    let na = row_norms(tape, a)?;
    let nb = row_norms(tape, b)?;
    let outer = tape.matmul(&na, &tape.transpose(&nb)?)?;
    tape.div(&dots, &outer)
}

/// Stable `log Σ exp` along `axis` (`PerRow` or `PerCol`).
fn log_sum_exp<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let mx = tape.max(x, axis)?;
    let shifted = tape.sub(x, &mx)?;
    let s = tape.sum(&tape.exp(&shifted)?, axis)?;
    tape.add(&tape.log(&s)?, &mx)
}

/// Weighted bidirectional InfoNCE over a batch of matched pairs.
///
/// Each direction is the negative log softmax probability of the matched
/// pair, with the matched pair included in the denominator.
pub fn contrastive_loss<T: Scalar>(
    tape: &Tape<T>,
    image: &Tensor<T>,
    text: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, _) = check_pair(image, text, "contrastive_loss")?;
    if n == 0 {
        return Err(Error::invalid("contrastive loss needs at least one pair"));
    }
    let logits = tape.scale(&cosine_similarity_matrix(tape, image, text)?, T::one() / cfg.tau)?;
    let i2t = tape.sum(&log_sum_exp(tape, &logits, Axis::PerRow)?, Axis::All)?;
    let t2i = tape.sum(&log_sum_exp(tape, &logits, Axis::PerCol)?, Axis::All)?;
    let diag = tape.sum(&tape.mul(&logits, &Tensor::identity(n))?, Axis::All)?;
    let weighted = tape.add(&tape.scale(&i2t, cfg.lambda_w)?, &tape.scale(&t2i, T::one() - cfg.lambda_w)?)?;
    tape.scale(&tape.sub(&weighted, &diag)?, T::one() / T::lit(n as f64))
}

/// Recorded intermediates of the contextual pipeline.
#[derive(Debug, Clone)]
pub struct ContextualGraph<T> {
    pub distances: Tensor<T>,
    pub normalized: Tensor<T>,
    pub affinities: Tensor<T>,
    pub contextual: Tensor<T>,
    /// Rank-0 `CX(U, V)`.
    pub similarity: Tensor<T>,
}

/// Contextual pipeline starting from a distance matrix (rows: points of `U`,
/// columns: points of `V`).
pub fn contextual_from_distances<T: Scalar>(
    tape: &Tape<T>,
    distances: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<ContextualGraph<T>> {
    cfg.validate()?;
    if distances.rank() != 2 || distances.is_empty() {
        return Err(Error::shape(format!("distance matrix must be non-empty 2-D, got {:?}", distances.shape())));
    }
    let row_min = tape.offset(&tape.min(distances, Axis::PerRow)?, cfg.eps)?;
    let normalized = tape.div(distances, &row_min)?;
    let exponent = tape.scale(&tape.offset(&tape.neg(&normalized)?, T::one())?, T::one() / cfg.h)?;
    let affinities = tape.exp(&exponent)?;
    let contextual = tape.div(&affinities, &tape.sum(&affinities, Axis::PerRow)?)?;
    let col_max = tape.max(&contextual, Axis::PerCol)?;
    let similarity = tape.mean(&col_max, Axis::All)?;
    Ok(ContextualGraph { distances: distances.clone(), normalized, affinities, contextual, similarity })
}

/// Cosine distances between point sets followed by the contextual pipeline.
pub fn contextual_graph<T: Scalar>(
    tape: &Tape<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<ContextualGraph<T>> {
    let (n, _) = check_pair(u, v, "contextual affinity")?;
    if n == 0 {
        return Err(Error::invalid("contextual affinity needs at least one point"));
    }
    let cos = cosine_similarity_matrix(tape, u, v)?;
    let distances = tape.offset(&tape.neg(&cos)?, T::one())?;
    contextual_from_distances(tape, &distances, cfg)
}

/// Snapshot of every matrix in the contextual pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityReport<T> {
    /// Cosine distances `1 - cos(u_i, v_j)`.
    pub distances: Tensor<T>,
    /// Distances divided by their row minimum plus `eps`.
    pub normalized: Tensor<T>,
    pub affinities: Tensor<T>,
    /// Row-normalized affinities.
    pub contextual: Tensor<T>,
    pub cx_scalar: T,
    /// For each column `j`, the first row `i` maximizing `contextual[i, j]`.
    pub col_argmax: Vec<usize>,
}

impl<T: Scalar> AffinityReport<T> {
    pub fn from_graph(g: &ContextualGraph<T>) -> Self {
        let cx = g.contextual.detach();
        let (rows, cols) = (cx.rows(), cx.cols());
        let col_argmax = (0..cols)
            .map(|j| {
                let mut best = 0;
                for i in 1..rows {
                    if cx.at(i, j) > cx.at(best, j) {
                        best = i;
                    }
                }
                best
            })
            .collect();
        AffinityReport {
            distances: g.distances.detach(),
            normalized: g.normalized.detach(),
            affinities: g.affinities.detach(),
            contextual: cx,
            cx_scalar: g.similarity.item(),
            col_argmax,
        }
    }

    /// Plain-text dump: one `# name` header per section, comma-separated rows.
    pub fn to_delimited(&self) -> String {
        let mut out = String::new();
        let sections = [
            ("distances", &self.distances),
            ("normalized", &self.normalized),
            ("affinities", &self.affinities),
            ("contextual", &self.contextual),
        ];
        for (name, m) in sections {
            let _ = writeln!(out, "# {name}");
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        let _ = writeln!(out, "# cx_scalar\n{}", self.cx_scalar);
        let idx: Vec<String> = self.col_argmax.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "# col_argmax\n{}", idx.join(","));
        out
    }
}

/// Contextual affinity report between image points `u` and text points `v`.
pub fn contextual_affinity<T: Scalar>(
    tape: &Tape<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<AffinityReport<T>> {
    Ok(AffinityReport::from_graph(&contextual_graph(tape, u, v, cfg)?))
}

/// `CX(U, V)`: mean over columns of the column maximum of the contextual matrix.
pub fn contextual_similarity<T: Scalar>(report: &AffinityReport<T>) -> T {
    let cx = &report.contextual;
    let cols = cx.cols();
    let mut acc = T::zero();
    for (j, &i) in report.col_argmax.iter().enumerate() {
        acc = acc + cx.at(i, j);
    }
    acc / T::lit(cols as f64)
}

/// `-log CX(U, V)`, or the mean of both directions when configured.
pub fn contextual_loss<T: Scalar>(
    tape: &Tape<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<Tensor<T>> {
    let forward = tape.neg(&tape.log(&contextual_graph(tape, u, v, cfg)?.similarity)?)?;
    if !cfg.symmetric_contextual {
        return Ok(forward);
    }
    let backward = tape.neg(&tape.log(&contextual_graph(tape, v, u, cfg)?.similarity)?)?;
    tape.scale(&tape.add(&forward, &backward)?, T::lit(0.5))
}

/// `L_contrastive(image_emb, text_emb) + alpha * L_contextual(image_pts, text_pts)`.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    image_emb: &Tensor<T>,
    text_emb: &Tensor<T>,
    image_pts: &Tensor<T>,
    text_pts: &Tensor<T>,
    cfg: &LossConfig<T>,
) -> Result<(Tensor<T>, LossBreakdown<T>)> {
    let n = image_emb.rows();
    if [text_emb.rows(), image_pts.rows(), text_pts.rows()].iter().any(|r| *r != n) {
        return Err(Error::shape(format!(
            "batch size mismatch: {}, {}, {}, {}",
            n,
            text_emb.rows(),
            image_pts.rows(),
            text_pts.rows()
        )));
    }
    let clip = contrastive_loss(tape, image_emb, text_emb, cfg)?;
    let cx = contextual_loss(tape, image_pts, text_pts, cfg)?;
    let total = tape.add(&clip, &tape.scale(&cx, cfg.alpha)?)?;
    let breakdown = LossBreakdown { total: total.item(), contrastive: clip.item(), contextual: cx.item() };
    Ok((total, breakdown))
}
