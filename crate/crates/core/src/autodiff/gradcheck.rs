//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: T,
    pub worst_index: usize,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and `x` as a rank-1 leaf and must return a
/// scalar. Every numeric probe runs on its own tape.
pub fn grad_check<T, F>(f: F, x: &[T], step: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    if !(step > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |point: Vec<T>| -> Result<T> {
        let tape = Tape::new();
        let leaf = tape.leaf(&Tensor::vector(point)?);
        let out = f(&tape, &leaf)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::numeric("grad_check", "objective is not finite"));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let leaf = tape.leaf(&Tensor::vector(x.to_vec())?);
    let out = f(&tape, &leaf)?;
    if out.rank() != 0 {
        return Err(Error::shape("grad_check objective must return a scalar"));
    }
    let analytic = match out.node() {
        Some(_) => tape.backward(&out)?.wrt(&leaf)?.to_vec(),
        None => vec![T::zero(); x.len()],
    };

    let two = T::lit(2.0);
    let mut numeric = Vec::with_capacity(x.len());
    let mut worst = (T::zero(), 0usize);
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] = plus[i] + step;
        let mut minus = x.to_vec();
        minus[i] = minus[i] - step;
        let fd = (eval(plus)? - eval(minus)?) / (two * step);
        let a = analytic[i];
        let denom = T::one().max(a.abs()).max(fd.abs());
        let err = (a - fd).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport { max_rel_error: worst.0, worst_index: worst.1, analytic, numeric })
}
