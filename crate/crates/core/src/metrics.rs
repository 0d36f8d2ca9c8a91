//! Quadratic Weighted Kappa.
//!
//! Category labels are 1-based (`1..=N`) everywhere in the public API; the
//! matrices store label `i` at row/column `i - 1`.
//!
//! ```
//! use aes_core::metrics::qwk;
//! let k = qwk(&[1, 2, 3, 1], &[1, 2, 3, 2], 3).unwrap();
//! assert!((k - 0.8).abs() < 1e-12);
//! ```

use ndarray::Array2;

use crate::error::{Error, Result};

/// Number of score categories on the essay scale.
pub const SCORE_CATEGORIES: usize = 6;

/// Observed, expected and weight matrices for one pair of rating vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrices {
    pub observed: Array2<f64>,
    pub expected: Array2<f64>,
    pub weights: Array2<f64>,
    pub categories: usize,
}

impl AgreementMatrices {
    pub fn new(a: &[u8], b: &[u8], categories: usize) -> Result<Self> {
        Ok(AgreementMatrices {
            observed: observed_matrix(a, b, categories)?,
            expected: expected_matrix(a, b, categories)?,
            weights: weight_matrix(categories)?,
            categories,
        })
    }

    /// Σ w·O
    pub fn weighted_observed(&self) -> f64 {
        weighted_sum(&self.weights, &self.observed)
    }

    /// Σ w·E
    pub fn weighted_expected(&self) -> f64 {
        weighted_sum(&self.weights, &self.expected)
    }

    pub fn kappa(&self) -> Result<f64> {
        let num = self.weighted_observed();
        let den = self.weighted_expected();
        if den == 0.0 {
            // Both raters are the same constant; disagreement is impossible.
            if num == 0.0 {
                return Ok(1.0);
            }
            return Err(Error::Degenerate(format!(
                "expected disagreement is zero but observed disagreement is {num}"
            )));
        }
        Ok(1.0 - num / den)
    }
}

/// `w[i][j] = (i - j)^2 / (N - 1)^2`.
pub fn weight_matrix(categories: usize) -> Result<Array2<f64>> {
    if categories < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 categories, got {categories}"
        )));
    }
    let denom = ((categories - 1) * (categories - 1)) as f64;
    Ok(Array2::from_shape_fn((categories, categories), |(i, j)| {
        let d = i.abs_diff(j);
        (d * d) as f64 / denom
    }))
}

/// Pair counts normalized by the number of pairs.
pub fn observed_matrix(a: &[u8], b: &[u8], categories: usize) -> Result<Array2<f64>> {
    validate(a, b, categories)?;
    let mut m = Array2::zeros((categories, categories));
    for (&x, &y) in a.iter().zip(b) {
        m[[x as usize - 1, y as usize - 1]] += 1.0;
    }
    let n = a.len() as f64;
    m.mapv_inplace(|c| c / n);
    Ok(m)
}

/// Outer product of the two normalized rating histograms.
pub fn expected_matrix(a: &[u8], b: &[u8], categories: usize) -> Result<Array2<f64>> {
    validate(a, b, categories)?;
    let ha = histogram(a, categories);
    let hb = histogram(b, categories);
    Ok(Array2::from_shape_fn((categories, categories), |(i, j)| {
        ha[i] * hb[j]
    }))
}

/// Quadratic Weighted Kappa between two rating vectors on `1..=categories`.
///
/// When both raters give the same constant rating the expected disagreement
/// is zero; this returns `1.0` in that case.
pub fn qwk(a: &[u8], b: &[u8], categories: usize) -> Result<f64> {
    AgreementMatrices::new(a, b, categories)?.kappa()
}

fn histogram(r: &[u8], categories: usize) -> Vec<f64> {
    let mut h = vec![0.0; categories];
    for &x in r {
        h[x as usize - 1] += 1.0;
    }
    let n = r.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

fn weighted_sum(w: &Array2<f64>, m: &Array2<f64>) -> f64 {
    w.iter().zip(m.iter()).map(|(a, b)| a * b).sum()
}

fn validate(a: &[u8], b: &[u8], categories: usize) -> Result<()> {
    if categories < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 categories, got {categories}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Precondition("rating vectors are empty".into()));
    }
    if let Some(&bad) = a
        .iter()
        .chain(b)
        .find(|&&x| x == 0 || x as usize > categories)
    {
        return Err(Error::Validation(format!(
            "rating {bad} outside 1..={categories}"
        )));
    }
    Ok(())
}
