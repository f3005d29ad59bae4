//! Linear reference estimators: confounded ridge regression and 2SLS.

use serde::{Deserialize, Serialize};

use crate::benchdata::{Dataset, Setting};
use crate::error::{Error, Result};
use crate::linalg::{ridge_regression, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    DirectRidge,
    TwoStageLs,
}

/// `f(x, o) = intercept + coef · [x, o]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub kind: BaselineKind,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub x_dim: usize,
    pub o_dim: usize,
}

impl LinearPredictor {
    pub fn predict(&self, x: &Matrix, o: Option<&Matrix>) -> Result<Vec<f64>> {
        let design = design(x, o)?;
        if design.cols() != self.coef.len() || x.cols() != self.x_dim {
            return Err(Error::dim(
                "LinearPredictor::predict",
                format!("input width {} but {} coefficients", design.cols(), self.coef.len()),
            ));
        }
        Ok(design
            .matvec(&self.coef)?
            .into_iter()
            .map(|v| v + self.intercept)
            .collect())
    }

    /// Coefficient on the first treatment column.
    pub fn slope(&self) -> f64 {
        self.coef[0]
    }
}

fn design(x: &Matrix, o: Option<&Matrix>) -> Result<Matrix> {
    match o {
        Some(o) => x.hstack(o),
        None => Ok(x.clone()),
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols()).map(|j| m.col(j).iter().sum::<f64>() / n).collect()
}

fn center(m: &Matrix, means: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        out.row_mut(i).iter_mut().zip(means).for_each(|(v, mu)| *v -= mu);
    }
    out
}

/// Ridge fit with an unpenalized intercept.
fn centered_ridge(a: &Matrix, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let mean_a = column_means(a);
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean_y).collect();
    let coef = ridge_regression(&center(a, &mean_a), &yc, lambda)?;
    let intercept = mean_y - coef.iter().zip(&mean_a).map(|(c, m)| c * m).sum::<f64>();
    Ok((coef, intercept))
}

pub fn baseline_fit(kind: BaselineKind, data: &Dataset, lambda: f64) -> Result<LinearPredictor> {
    if !matches!(data.setting, Setting::Iv | Setting::Ivoc) {
        return Err(Error::InvalidArgument(format!(
            "baselines need an IV or IV-OC dataset, got {:?}",
            data.setting
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(
            "lambda",
            format!("must be finite and >= 0, got {lambda}"),
        ));
    }
    if data.n() < 2 {
        return Err(Error::InvalidArgument("baselines need at least two rows".into()));
    }
    let o = data.o.as_ref();
    let y = data.y_vec();
    let (x_dim, o_dim) = (data.x.cols(), o.map_or(0, |o| o.cols()));
    let (coef, intercept) = match kind {
        BaselineKind::DirectRidge => centered_ridge(&design(&data.x, o)?, &y, lambda)?,
        BaselineKind::TwoStageLs => {
            for j in 0..data.z.cols() {
                let col = data.z.col(j);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                if col.iter().all(|v| (v - mean).abs() <= 1e-12 * mean.abs().max(1.0)) {
                    return Err(Error::Singular(format!(
                        "instrument column {j} has zero variance; first stage is degenerate"
                    )));
                }
            }
            let first = design(&data.z, o)?;
            let mut fitted = Matrix::zeros(data.n(), x_dim);
            for j in 0..x_dim {
                let (c, b0) = centered_ridge(&first, &data.x.col(j), lambda)?;
                let pred = first.matvec(&c)?;
                for (i, p) in pred.iter().enumerate() {
                    fitted.set(i, j, p + b0);
                }
            }
            centered_ridge(&design(&fitted, o)?, &y, lambda)?
        }
    };
    Ok(LinearPredictor {
        kind,
        coef,
        intercept,
        x_dim,
        o_dim,
    })
}
