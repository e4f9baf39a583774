//! Small dense kernels shared by every stage: cosine similarity, normalization
//! and numerically stable softmax.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / |a|`, or an error for the zero vector.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("vector"));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine similarity of two non-zero vectors.
///
/// Computed as `(a . b) / (|a| |b|)` so that the result is exactly symmetric.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_view(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => cosine_sim(a, b),
        _ => cosine_sim(&a.to_vec(), &b.to_vec()),
    }
}

/// Softmax of one row with max subtraction.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn row_softmax(scores: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        let p = softmax(&row.to_vec())?;
        out.row_mut(i).iter_mut().zip(p).for_each(|(o, v)| *o = v);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-major argmax over a matrix, ties to the lowest (row, col).
pub fn argmax2(m: ArrayView2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((i, j), v) in m.indexed_iter() {
        if *v > best_v {
            best_v = *v;
            best = (i, j);
        }
    }
    best
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Converts an f32 feature matrix to f64 rows.
pub fn to_f64(m: ArrayView2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn softmax_examples() {
        let p = row_softmax(array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(p, array![[0.5, 0.5]]);
        let p = row_softmax(array![[2f64.ln(), 0.0]].view()).unwrap();
        assert!((p[[0, 0]] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p[[0, 1]] - 1.0 / 3.0).abs() < 1e-9);
        let p = row_softmax(array![[1000.0, 0.0]].view()).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        assert!(p[[0, 1]] < 1e-300);
        assert!(row_softmax(array![[f64::NAN, 0.0]].view()).is_err());
        assert!(row_softmax(array![[f64::INFINITY, 0.0]].view()).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax2(array![[0.0, 2.0], [2.0, 1.0]].view()), (0, 1));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let ab = cosine_sim(&a, &b).unwrap();
            let ba = cosine_sim(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-500.0f64..500.0, 1..12)) {
            let p = softmax(&row).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
