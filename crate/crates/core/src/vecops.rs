//! Primitive operations on flat parameter vectors.
//!
//! Everything here is a pure function. Vectors are plain `f64` slices so the
//! same kernels serve model parameters, model updates and score arrays;
//! [`ParamVector`] is the validated owner type handed between modules.

use std::cmp::Ordering;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A non-empty vector of finite reals: a model, or a model update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Validates that `values` is non-empty and every element is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("parameter vector must have length >= 1");
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "parameter vector must have length >= 1");
        ParamVector(vec![0.0; dim])
    }

    /// Wraps values produced by arithmetic on already-validated vectors.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Vec<f64> {
        v.0
    }
}

/// Three-valued signs, one per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(i) = values.iter().position(|s| !(-1..=1).contains(s)) {
            return invalid(format!("sign at index {i} is {}, expected -1, 0 or 1", values[i]));
        }
        Ok(SignVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    /// The signs as reals, for building update vectors along them.
    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&s| f64::from(s)).collect()
    }
}

impl Deref for SignVector {
    type Target = [i8];

    fn deref(&self) -> &[i8] {
        &self.0
    }
}

/// Indicator of the `k` largest-magnitude coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKMask {
    bits: Vec<bool>,
    k: usize,
}

impl TopKMask {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Indices of the selected coordinates in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

#[inline]
fn signum(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Element-wise sign with `sgn(0) = 0`.
pub fn sign(v: &[f64]) -> SignVector {
    SignVector(v.iter().map(|&x| signum(x)).collect())
}

/// Marks the `k` coordinates of largest absolute value. Ties go to the lower index.
pub fn top_k_mask(v: &[f64], k: usize) -> Result<TopKMask> {
    let d = v.len();
    if k == 0 || k > d {
        return invalid(format!("top-k requires 1 <= k <= d, got k={k}, d={d}"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    // Total order: magnitude descending, then index ascending.
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
    };
    if k < d {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut bits = vec![false; d];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(TopKMask { bits, k })
}

/// Fraction of coordinates on which `sgn(x)` and `sgn(y)` agree.
pub fn sign_alignment_ratio(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    if x.is_empty() {
        return invalid("sign alignment ratio of empty vectors");
    }
    let mismatched = x
        .iter()
        .zip(y)
        .filter(|(&a, &b)| signum(a) != signum(b))
        .count();
    Ok(1.0 - mismatched as f64 / x.len() as f64)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// A zero-norm argument yields [`Error::Degenerate`]; callers pick the fallback.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity with a zero-norm vector".into()));
    }
    // sqrt(|a|^2 |b|^2) is exact for a == b, so parallel copies score exactly 1
    let prod = dot(a, a) * dot(b, b);
    let denom = if prod.is_finite() && prod > 0.0 { prod.sqrt() } else { na * nb };
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Median; even-length inputs average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("median of an empty set");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Median-based z-scores: distance from the median in population standard
/// deviations. A set with zero spread scores all zeros.
pub fn mz_scores(values: &[f64]) -> Result<Vec<f64>> {
    let med = median(values)?;
    let sigma = population_std(values);
    if sigma == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|x| (x - med) / sigma).collect())
}

/// Coordinate-wise mean of equally sized vectors.
pub fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut iter = vectors.into_iter();
    let first = match iter.next() {
        Some(v) => v,
        None => return invalid("mean of an empty set of vectors"),
    };
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        check_len(acc.len(), v.len())?;
        axpy(1.0, v, &mut acc);
        count += 1;
    }
    let inv = count as f64;
    acc.iter_mut().for_each(|x| *x /= inv);
    Ok(acc)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
