//! Saddle estimators over learned feature classes.
//!
//! IV: `f(x) = ⟨φ(x), u⟩`, `g(z) = ⟨ψ(z), v⟩`.
//! IV-OC / PCL: `f_G(a, c) = ⟨G, Q(c)ᵀ ⊗ φ(a)ᵀ⟩_F` with `G ∈ R^{d_y × d_x²}`
//! and dual `g_w(b, c) = ψ(b)ᵀ V(c)ᵀ Q(c) w`.

use serde::{Deserialize, Serialize};

use super::problem::{
    normalized_weights, scale_rows, Diagnostics, MomentProblem, RegularizerKind, RegularizerSpec, SolverConfig,
};
use crate::benchdata::{Dataset, Setting};
use crate::error::{Error, Result};
use crate::linalg::{dot, kron_apply, Matrix};
use crate::spectral_rep::{ConditionalSetting, FactoredRepresentation, IvRepresentation, Representation};

/// Largest primal dimension for which the function-norm regularizer's
/// `p x p` Gram matrix is formed.
pub const MAX_FUNCTION_L2_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvSolution {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
    pub diagnostics: Diagnostics,
}

/// Shared by IV-OC and PCL; `setting` records which.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredSolution {
    pub setting: ConditionalSetting,
    /// `d_y x d_x²`.
    pub g: Matrix,
    pub w: Vec<f64>,
    pub lambda: f64,
    pub regularizer: RegularizerKind,
    pub diagnostics: Diagnostics,
}

pub type IvocSolution = FactoredSolution;
pub type PclSolution = FactoredSolution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Solution {
    Iv(IvSolution),
    Factored(FactoredSolution),
}

/// Solves the IV saddle problem for given per-row features.
pub fn solve_iv_features(
    phi: &Matrix,
    psi: &Matrix,
    y: &[f64],
    weights: Option<&[f64]>,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<IvSolution> {
    reg.validate()?;
    let prob = MomentProblem::from_samples(phi, psi, y, weights, reg.kind)?;
    let (u, v, diagnostics) = prob.solve(reg.lambda, solver)?;
    Ok(IvSolution {
        u,
        v,
        lambda: reg.lambda,
        regularizer: reg.kind,
        diagnostics,
    })
}

pub fn solve_iv_saddle(
    rep: &IvRepresentation,
    data: &Dataset,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<IvSolution> {
    expect_setting(data, Setting::Iv)?;
    let phi = rep.phi.predict(&data.x)?;
    let psi = rep.psi.predict(&data.z)?;
    solve_iv_features(&phi, &psi, &data.y_vec(), None, reg, solver)
}

/// Rows `vec(Q(c_i)ᵀ)`, i.e. entry `α·d_x + β` holds `Q(c_i)[β, α]`.
fn q_rows(rep: &FactoredRepresentation, c: &Matrix) -> Result<Matrix> {
    let (dx, dy) = (rep.d_x(), rep.d_y());
    let qs = rep.q_matrices(c)?;
    let mut out = Matrix::zeros(c.rows(), dy * dx);
    for (i, q) in qs.iter().enumerate() {
        let row = out.row_mut(i);
        for alpha in 0..dy {
            for beta in 0..dx {
                row[alpha * dx + beta] = q.get(beta, alpha);
            }
        }
    }
    Ok(out)
}

/// Primal features `vec(Q(c_i)ᵀ ⊗ φ(a_i)ᵀ)` in row-major order, one row per
/// sample. Width `d_y · d_x²`; used by oracles and small problems.
pub fn factored_primal_features(rep: &FactoredRepresentation, a: &Matrix, c: &Matrix) -> Result<Matrix> {
    if a.rows() != c.rows() {
        return Err(Error::dim(
            "factored_primal_features",
            format!("{} vs {} rows", a.rows(), c.rows()),
        ));
    }
    let qr = q_rows(rep, c)?;
    let phi = rep.phi.predict(a)?;
    let dx = rep.d_x();
    let k = qr.cols();
    let mut out = Matrix::zeros(a.rows(), k * dx);
    for i in 0..a.rows() {
        let (qi, pi) = (qr.row(i), phi.row(i));
        let row = out.row_mut(i);
        for (kk, qv) in qi.iter().enumerate() {
            for (g, pv) in pi.iter().enumerate() {
                row[kk * dx + g] = qv * pv;
            }
        }
    }
    Ok(out)
}

/// Observations for one factored fit: target `a`, instrument `b`,
/// conditioning `c` and outcome `y`, with optional sample weights.
pub struct FactoredSample<'a> {
    pub a: &'a Matrix,
    pub b: &'a Matrix,
    pub c: &'a Matrix,
    pub y: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

pub fn solve_factored(
    rep: &FactoredRepresentation,
    sample: &FactoredSample<'_>,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<FactoredSolution> {
    reg.validate()?;
    let n = sample.a.rows();
    if sample.b.rows() != n || sample.c.rows() != n || sample.y.len() != n {
        return Err(Error::dim(
            "solve_factored",
            "target, instrument, conditioning and outcome row counts differ",
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("saddle problem needs at least one row".into()));
    }
    let w = normalized_weights(sample.weights, n)?;
    let (dx, dy) = (rep.d_x(), rep.d_y());
    let p = dy * dx * dx;
    let h = rep.outcome_features(sample.b, sample.c)?;
    let qr = q_rows(rep, sample.c)?;
    let phi = rep.phi.predict(sample.a)?;
    if !h.is_finite() || !qr.is_finite() || !phi.is_finite() {
        return Err(Error::NonFinite("representation features".into()));
    }
    // A[r, :] = Σ_i w_i h_i[r] vec(Q_iᵀ ⊗ φ_iᵀ) = vec(Σ_i (w_i h_i[r] q_i) φ_iᵀ).
    let mut a = Matrix::zeros(dy, p);
    for r in 0..dy {
        let coef: Vec<f64> = (0..n).map(|i| w[i] * h.get(i, r)).collect();
        let block = scale_rows(&qr, &coef).matmul_tn(&phi)?;
        a.row_mut(r).copy_from_slice(block.as_slice());
    }
    let hw = scale_rows(&h, &w);
    let m = hw.matmul_tn(&h)?;
    let b = hw.matvec_t(sample.y)?;
    let r = match reg.kind {
        RegularizerKind::ParamL2 => None,
        RegularizerKind::FunctionL2 => {
            if p > MAX_FUNCTION_L2_DIM {
                return Err(Error::config(
                    "regularizer.kind",
                    format!("function_l2 needs d_y·d_x² <= {MAX_FUNCTION_L2_DIM}, got {p}"),
                ));
            }
            let f = factored_primal_features(rep, sample.a, sample.c)?;
            Some(scale_rows(&f, &w).matmul_tn(&f)?)
        }
    };
    let prob = MomentProblem::from_moments(a, m, b, r, reg.kind)?;
    let (u, v, diagnostics) = prob.solve(reg.lambda, solver)?;
    Ok(FactoredSolution {
        setting: rep.setting,
        g: Matrix::from_vec(dy, dx * dx, u)?,
        w: v,
        lambda: reg.lambda,
        regularizer: reg.kind,
        diagnostics,
    })
}

pub fn solve_ivoc_saddle(
    rep: &FactoredRepresentation,
    data: &Dataset,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<IvocSolution> {
    expect_setting(data, Setting::Ivoc)?;
    expect_rep(rep, ConditionalSetting::Ivoc)?;
    let o = data.o.as_ref().expect("validated IV-OC dataset has o");
    let y = data.y_vec();
    let sample = FactoredSample {
        a: &data.x,
        b: &data.z,
        c: o,
        y: &y,
        weights: None,
    };
    solve_factored(rep, &sample, reg, solver)
}

pub fn solve_pcl_saddle(
    rep: &FactoredRepresentation,
    data: &Dataset,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<PclSolution> {
    expect_setting(data, Setting::Pcl)?;
    expect_rep(rep, ConditionalSetting::Pcl)?;
    let w = data.w.as_ref().expect("validated PCL dataset has w");
    let y = data.y_vec();
    let sample = FactoredSample {
        a: w,
        b: &data.z,
        c: &data.x,
        y: &y,
        weights: None,
    };
    solve_factored(rep, &sample, reg, solver)
}

/// `f(x) = ⟨φ(x), u⟩`.
pub fn predict_iv(sol: &IvSolution, rep: &IvRepresentation, x: &Matrix) -> Result<Vec<f64>> {
    if sol.u.len() != rep.d() {
        return Err(Error::dim(
            "predict_iv",
            format!("u has {} entries, rep has d = {}", sol.u.len(), rep.d()),
        ));
    }
    rep.phi.predict(x)?.matvec(&sol.u)
}

/// `f_G(a, c)` for each row. Row `i` is the scalar
/// `kron_apply(vec(Q(c_i)ᵀ)ᵀ, φ(a_i)ᵀ, G')` where `G'` is `G` viewed as
/// `(d_y·d_x) x d_x`; the `G'Φᵀ` factor is shared across rows.
pub fn predict_factored(
    sol: &FactoredSolution,
    rep: &FactoredRepresentation,
    a: &Matrix,
    c: &Matrix,
) -> Result<Vec<f64>> {
    if sol.setting != rep.setting {
        return Err(Error::InvalidArgument(format!(
            "{:?} solution used with a {:?} representation",
            sol.setting, rep.setting
        )));
    }
    let (dx, dy) = (rep.d_x(), rep.d_y());
    if sol.g.shape() != (dy, dx * dx) {
        return Err(Error::dim(
            "predict_factored",
            format!("G is {:?}, rep needs {dy}x{}", sol.g.shape(), dx * dx),
        ));
    }
    if a.rows() != c.rows() {
        return Err(Error::dim(
            "predict_factored",
            format!("{} vs {} rows", a.rows(), c.rows()),
        ));
    }
    let g = sol.g.clone().reshape(dy * dx, dx)?;
    let qr = q_rows(rep, c)?;
    let phi = rep.phi.predict(a)?;
    let t = g.matmul_nt(&phi)?;
    Ok((0..a.rows())
        .map(|i| qr.row(i).iter().enumerate().map(|(k, q)| q * t.get(k, i)).sum())
        .collect())
}

/// Single-row evaluation through `kron_apply`; the reference path for tests.
pub fn predict_factored_row(sol: &FactoredSolution, rep: &FactoredRepresentation, a: &[f64], c: &[f64]) -> Result<f64> {
    let (dx, dy) = (rep.d_x(), rep.d_y());
    let qr = q_rows(rep, &Matrix::row_vector(c))?;
    let phi = rep.phi.predict(&Matrix::row_vector(a))?;
    let g = sol.g.clone().reshape(dy * dx, dx)?;
    Ok(kron_apply(&qr, &phi, &g)?.get(0, 0))
}

/// Evaluates the structural function: `f(x)` for IV, `f(x, o)` for IV-OC
/// and `f(x, w)` for PCL, with `extra` carrying `o` or `w`.
pub fn predict_structural(
    solution: &Solution,
    rep: &Representation,
    x: &Matrix,
    extra: Option<&Matrix>,
) -> Result<Vec<f64>> {
    match (solution, rep) {
        (Solution::Iv(s), Representation::Iv(r)) => {
            if extra.is_some() {
                return Err(Error::InvalidArgument("IV prediction takes no extra column".into()));
            }
            predict_iv(s, r, x)
        }
        (Solution::Factored(s), Representation::Factored(r)) => {
            let extra = extra.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{:?} prediction needs the {} column",
                    s.setting,
                    extra_name(s.setting)
                ))
            })?;
            match s.setting {
                ConditionalSetting::Ivoc => predict_factored(s, r, x, extra),
                ConditionalSetting::Pcl => predict_factored(s, r, extra, x),
            }
        }
        _ => Err(Error::InvalidArgument(
            "solution and representation come from different settings".into(),
        )),
    }
}

fn extra_name(setting: ConditionalSetting) -> &'static str {
    match setting {
        ConditionalSetting::Ivoc => "o",
        ConditionalSetting::Pcl => "w",
    }
}

/// Mean of `f(x, w)` over the supplied proxy samples.
pub fn pcl_causal_effect(
    sol: &PclSolution,
    rep: &FactoredRepresentation,
    x: &[f64],
    w_samples: &Matrix,
) -> Result<f64> {
    if sol.setting != ConditionalSetting::Pcl {
        return Err(Error::InvalidArgument("causal effect needs a PCL solution".into()));
    }
    let n = w_samples.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("w_samples is empty".into()));
    }
    let xs = Matrix::from_vec(n, x.len(), x.iter().copied().cycle().take(n * x.len()).collect())?;
    let f = predict_factored(sol, rep, w_samples, &xs)?;
    Ok(f.iter().sum::<f64>() / n as f64)
}

/// Dual witness `g(b, c)` at each row: `ψ(b)ᵀV(c)ᵀQ(c)w`.
pub fn factored_dual(sol: &FactoredSolution, rep: &FactoredRepresentation, b: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
    let h = rep.outcome_features(b, c)?;
    Ok((0..h.rows()).map(|i| dot(h.row(i), &sol.w)).collect())
}

fn expect_setting(data: &Dataset, want: Setting) -> Result<()> {
    if data.setting != want {
        return Err(Error::InvalidArgument(format!(
            "expected a {want:?} dataset, got {:?}",
            data.setting
        )));
    }
    Ok(())
}

fn expect_rep(rep: &FactoredRepresentation, want: ConditionalSetting) -> Result<()> {
    if rep.setting != want {
        return Err(Error::InvalidArgument(format!(
            "expected a {want:?} representation, got {:?}",
            rep.setting
        )));
    }
    Ok(())
}
