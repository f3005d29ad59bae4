//! In-batch contrastive objectives on an `n x n` score matrix whose diagonal
//! holds the positive pairs. Both return a value to be minimized together
//! with its exact gradient with respect to the scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L2,
    Mle,
}

fn check_square(s: &Matrix, ctx: &str) -> Result<usize> {
    let (n, m) = s.shape();
    if n != m {
        return Err(Error::dim(ctx, format!("score matrix is {n}x{m}, expected square")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "{ctx}: need at least 2 pairs for in-batch negatives, got {n}"
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite(ctx.to_string()));
    }
    Ok(n)
}

/// Negated least-squares ratio objective
/// `(2/n) Σ s_ii − (1/(n(n−1))) Σ_{i≠j} s_ij² − 1`.
pub fn contrastive_l2_loss(s: &Matrix) -> Result<(f64, Matrix)> {
    let n = check_square(s, "contrastive_l2_loss")?;
    let nf = n as f64;
    let off_w = 1.0 / (nf * (nf - 1.0));
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = s.get(i, j);
            if i == j {
                diag += v;
                grad.set(i, j, -2.0 / nf);
            } else {
                off += v * v;
                grad.set(i, j, 2.0 * off_w * v);
            }
        }
    }
    let objective = 2.0 * diag / nf - off_w * off - 1.0;
    Ok((-objective, grad))
}

/// Per-anchor log-likelihood objective
/// `−(1/n) Σ_i log s_ii + (1/n) Σ_i log Σ_{j≠i} s_ij` on positive scores.
pub fn contrastive_mle_loss(s: &Matrix) -> Result<(f64, Matrix)> {
    let n = check_square(s, "contrastive_mle_loss")?;
    for i in 0..n {
        for j in 0..n {
            if s.get(i, j) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "contrastive_mle_loss: score at pair ({i}, {j}) is {} but must be positive",
                    s.get(i, j)
                )));
            }
        }
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let row = s.row(i);
        let neg: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
        value += -row[i].ln() + neg.ln();
        for (j, v) in row.iter().enumerate() {
            let g = if j == i { -1.0 / (nf * v) } else { 1.0 / (nf * neg) };
            grad.set(i, j, g);
        }
    }
    Ok((value / nf, grad))
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `kind` on raw network scores. The likelihood objective sees
/// softplus-linked scores and its gradient is chained back to the raw ones.
pub fn loss_on_raw_scores(kind: LossKind, raw: &Matrix) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::L2 => contrastive_l2_loss(raw),
        LossKind::Mle => {
            let mut linked = raw.clone();
            linked.as_mut_slice().iter_mut().for_each(|v| *v = softplus(*v));
            let (value, mut grad) = contrastive_mle_loss(&linked)?;
            for (g, r) in grad.as_mut_slice().iter_mut().zip(raw.as_slice()) {
                *g *= sigmoid(*r);
            }
            Ok((value, grad))
        }
    }
}

/// Maps a raw score to the nonnegative quantity the loss treats as a ratio.
pub fn link(kind: LossKind, raw: f64) -> f64 {
    match kind {
        LossKind::L2 => raw,
        LossKind::Mle => softplus(raw),
    }
}
