//! Confusion-aware calibrated margin.
//!
//! `M[y][c] = S[y][c] * m * Delta * delta[y]`: classes the model
//! under-predicts get larger margins against the classes they resemble.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_view, normalized};

/// Mean of each class's feature rows, L2-normalized.
///
/// `features_by_class[c]` holds the rows of class `c` (each of width `dim`).
pub fn visual_prototypes(features_by_class: &[Vec<Vec<f64>>], dim: usize) -> Result<Array2<f64>> {
    let mut protos = Array2::zeros((features_by_class.len(), dim));
    for (c, rows) in features_by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        let n = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let unit = normalized(&mean).map_err(|_| Error::EmptyClass(c))?;
        protos.row_mut(c).iter_mut().zip(unit).for_each(|(o, v)| *o = v);
    }
    Ok(protos)
}

/// `S[i][j] = max(cos(vis_i, vis_j), cos(txt_i, txt_j))`, clamped to [0, 1].
pub fn similarity_matrix(visual: &Array2<f64>, text: &Array2<f64>) -> Result<Array2<f64>> {
    if visual.dim() != text.dim() {
        return Err(Error::InvalidArgument("prototype shapes differ".into()));
    }
    let c = visual.nrows();
    let mut s = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let v = cosine_view(visual.row(i), visual.row(j))?;
            let t = cosine_view(text.row(i), text.row(j))?;
            let x = v.max(t).clamp(0.0, 1.0);
            s[[i, j]] = x;
            s[[j, i]] = x;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tendency {
    /// Confident predictions per class.
    pub sigma: Vec<usize>,
    pub delta: Vec<f64>,
    pub big_delta: f64,
}

/// Per-class tendency from `(argmax class, max probability)` pairs.
///
/// If no prediction clears `tau`, the margin is disabled (all zeros).
pub fn tendency_stats(predictions: &[(usize, f64)], tau: f64, n_classes: usize) -> Tendency {
    let mut sigma = vec![0usize; n_classes];
    for &(c, p) in predictions {
        if p >= tau {
            sigma[c] += 1;
        }
    }
    let max = sigma.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Tendency {
            sigma,
            delta: vec![0.0; n_classes],
            big_delta: 0.0,
        };
    }
    let delta: Vec<f64> = sigma.iter().map(|&s| 1.0 - s as f64 / max as f64).collect();
    let big_delta = delta.iter().copied().fold(0.0, f64::max);
    Tendency {
        sigma,
        delta,
        big_delta,
    }
}

/// `m_c = m * Delta * delta_c`.
pub fn margin_scales(t: &Tendency, base_scale: f64) -> Vec<f64> {
    t.delta.iter().map(|d| base_scale * t.big_delta * d).collect()
}

/// `M[i][j] = S[i][j] * m_i` with a zero diagonal.
pub fn margin_matrix(sim: &Array2<f64>, scales: &[f64]) -> Array2<f64> {
    let mut m = sim.clone();
    for ((i, j), v) in m.indexed_iter_mut() {
        *v = if i == j { 0.0 } else { *v * scales[i] };
    }
    m
}

/// Snapshot of the margin used for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginState {
    pub sim: Array2<f64>,
    pub tendency: Tendency,
    pub scales: Vec<f64>,
    pub matrix: Array2<f64>,
    pub base_scale: f64,
    pub tau: f64,
}

impl MarginState {
    pub fn build(sim: Array2<f64>, tendency: Tendency, base_scale: f64, tau: f64) -> Self {
        let scales = margin_scales(&tendency, base_scale);
        let matrix = margin_matrix(&sim, &scales);
        Self {
            sim,
            tendency,
            scales,
            matrix,
            base_scale,
            tau,
        }
    }

    /// No margin at all: plain cross-entropy.
    pub fn zero(n_classes: usize) -> Self {
        Self::build(
            Array2::zeros((n_classes, n_classes)),
            Tendency {
                sigma: vec![0; n_classes],
                delta: vec![0.0; n_classes],
                big_delta: 0.0,
            },
            0.0,
            0.0,
        )
    }
}

/// Margin cross-entropy for true class `y` and logits `z`:
/// `-log(e^{z_y} / (e^{z_y} + sum_{c != y} e^{z_c + M[y][c]}))`.
///
/// Returns the loss and its gradient with respect to `z`.
pub fn margin_loss(y: usize, z: &[f64], margin: &Array2<f64>) -> Result<(f64, Array1<f64>)> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if y >= z.len() {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let adjusted: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(c, &v)| if c == y { v } else { v + margin[[y, c]] })
        .collect();
    if adjusted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("margin"));
    }
    let max = adjusted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = adjusted.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = max + sum.ln() - z[y];
    let mut grad = Array1::from_iter(exps.into_iter().map(|e| e / sum));
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Standard softmax cross-entropy, computed independently of `margin_loss`.
pub fn cross_entropy(y: usize, z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[y]
}
