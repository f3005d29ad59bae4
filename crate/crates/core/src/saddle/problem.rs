//! The linear saddle problem shared by every setting:
//!
//! `min_u max_v  vᵀb − vᵀAu − ½ vᵀMv + (λ/2) uᵀRu`
//!
//! with `A = Ê[h Fᵀ]`, `M = Ê[h hᵀ]`, `b = Ê[h y]` for primal features `F`
//! and dual features `h`. Maximizing out `v` leaves
//! `½ (b − Au)ᵀ M⁻¹ (b − Au) + (λ/2) uᵀRu`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    backward_substitute_t, cholesky, dot, forward_substitute, norm2, pseudo_inverse, solve_spd, Matrix,
    DEFAULT_PINV_TOL,
};

pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// `‖u‖²`, the norm of the representation coefficients.
    #[default]
    ParamL2,
    /// `Ê[f(X)²]`, the empirical function norm.
    FunctionL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    #[serde(default)]
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl RegularizerSpec {
    pub fn param_l2(lambda: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::ParamL2,
            lambda,
        }
    }

    pub fn function_l2(lambda: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::FunctionL2,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "lambda",
                format!("must be finite and >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    ClosedForm,
    /// Simultaneous extragradient descent-ascent.
    Gda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdaConfig {
    pub max_iters: usize,
    /// Stop once the first-order residual drops below `tol · max(1, ‖b‖)`.
    pub tol: f64,
    /// Constant step size; `None` uses half the inverse operator norm.
    pub step: Option<f64>,
    /// Return the running average of the iterates instead of the last one.
    pub average: bool,
}

impl Default for GdaConfig {
    fn default() -> Self {
        GdaConfig {
            max_iters: 200_000,
            tol: 1e-8,
            step: None,
            average: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub gda: GdaConfig,
}

impl SolverConfig {
    pub fn closed_form() -> Self {
        SolverConfig::default()
    }

    pub fn gda(gda: GdaConfig) -> Self {
        SolverConfig {
            method: Method::Gda,
            gda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: Method,
    pub iterations: usize,
    /// Norm of the first-order (KKT) residual of both players.
    pub gap: f64,
    pub objective: f64,
}

/// Empirical moments of one saddle problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentProblem {
    /// `q x p`.
    pub a: Matrix,
    /// `q x q`, jitter included.
    pub m: Matrix,
    pub b: Vec<f64>,
    /// `p x p` regularizer quadratic form; `None` is the identity.
    pub r: Option<Matrix>,
    pub kind: RegularizerKind,
}

impl MomentProblem {
    /// Moments from per-row primal features `f` (`n x p`), dual features `h`
    /// (`n x q`) and outcomes `y`. Weights default to `1/n` and are
    /// normalized to sum to one.
    pub fn from_samples(
        f: &Matrix,
        h: &Matrix,
        y: &[f64],
        weights: Option<&[f64]>,
        kind: RegularizerKind,
    ) -> Result<Self> {
        let n = f.rows();
        if h.rows() != n || y.len() != n {
            return Err(Error::dim(
                "MomentProblem",
                format!("{n} primal rows, {} dual rows, {} outcomes", h.rows(), y.len()),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("saddle problem needs at least one row".into()));
        }
        let w = normalized_weights(weights, n)?;
        if !f.is_finite() || !h.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("saddle problem inputs".into()));
        }
        let hw = scale_rows(h, &w);
        let a = hw.matmul_tn(f)?;
        let m = hw.matmul_tn(h)?;
        let b = hw.matvec_t(y)?;
        let r = match kind {
            RegularizerKind::ParamL2 => None,
            RegularizerKind::FunctionL2 => Some(scale_rows(f, &w).matmul_tn(f)?),
        };
        Self::from_moments(a, m, b, r, kind)
    }

    /// Assembles a problem from precomputed moments; `m` is the raw dual
    /// second moment and receives the jitter here.
    pub fn from_moments(
        a: Matrix,
        mut m: Matrix,
        b: Vec<f64>,
        r: Option<Matrix>,
        kind: RegularizerKind,
    ) -> Result<Self> {
        let (q, p) = a.shape();
        let r_ok = r.as_ref().is_none_or(|r| r.shape() == (p, p) && r.is_finite());
        if m.shape() != (q, q) || b.len() != q || !r_ok {
            return Err(Error::dim(
                "MomentProblem",
                format!(
                    "A {:?}, M {:?}, b {}, R must be {p}x{p} and finite",
                    a.shape(),
                    m.shape(),
                    b.len()
                ),
            ));
        }
        if !a.is_finite() || !m.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("saddle moments".into()));
        }
        let jitter = JITTER * m.trace() / q as f64;
        m.add_diag(jitter);
        Ok(MomentProblem { a, m, b, r, kind })
    }

    fn apply_r(&self, u: &[f64]) -> Result<Vec<f64>> {
        match &self.r {
            Some(r) => r.matvec(u),
            None => Ok(u.to_vec()),
        }
    }

    pub fn primal_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn dual_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn objective(&self, u: &[f64], v: &[f64], lambda: f64) -> Result<f64> {
        let au = self.a.matvec(u)?;
        let mv = self.m.matvec(v)?;
        let ru = self.apply_r(u)?;
        Ok(dot(v, &self.b) - dot(v, &au) - 0.5 * dot(v, &mv) + 0.5 * lambda * dot(u, &ru))
    }

    /// Gradient field `(∇_u L, −∇_v L) = (λRu − Aᵀv, Au + Mv − b)`.
    pub fn operator(&self, u: &[f64], v: &[f64], lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut gu = self.a.matvec_t(v)?;
        let ru = self.apply_r(u)?;
        for (g, r) in gu.iter_mut().zip(&ru) {
            *g = lambda * r - *g;
        }
        let mut gv = self.a.matvec(u)?;
        let mv = self.m.matvec(v)?;
        for ((g, m), b) in gv.iter_mut().zip(&mv).zip(&self.b) {
            *g += m - b;
        }
        Ok((gu, gv))
    }

    pub fn kkt_residual(&self, u: &[f64], v: &[f64], lambda: f64) -> Result<f64> {
        let (gu, gv) = self.operator(u, v, lambda)?;
        Ok((dot(&gu, &gu) + dot(&gv, &gv)).sqrt())
    }

    /// Exact solution with the dual eliminated. For `λ = 0` the
    /// minimum-norm minimizer is returned.
    pub fn solve_closed_form(&self, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let l = cholesky(&self.m).map_err(|_| {
            Error::Singular(
                "dual second-moment matrix is singular even after jitter; the dual features are degenerate".into(),
            )
        })?;
        let q = self.dual_dim();
        let p = self.primal_dim();
        // Whitened system: Ã = L⁻¹A, b̃ = L⁻¹b, so the reduced objective is
        // ½‖b̃ − Ãu‖² + (λ/2) uᵀRu.
        let mut at = Matrix::zeros(q, p);
        for j in 0..p {
            let col = forward_substitute(&l, &self.a.col(j));
            for i in 0..q {
                at.set(i, j, col[i]);
            }
        }
        let bt = forward_substitute(&l, &self.b);
        let u = if lambda == 0.0 {
            pseudo_inverse(&at, DEFAULT_PINV_TOL)?.matvec(&bt)?
        } else {
            match self.kind {
                RegularizerKind::ParamL2 => {
                    let mut k = at.matmul_nt(&at)?;
                    k.add_diag(lambda);
                    at.matvec_t(&solve_spd(&k, &bt)?)?
                }
                RegularizerKind::FunctionL2 => {
                    let mut k = at.matmul_tn(&at)?;
                    match &self.r {
                        Some(r) => k = k.add(&r.scale(lambda))?,
                        None => k.add_diag(lambda),
                    }
                    let rhs = at.matvec_t(&bt)?;
                    // The Kronecker-structured features are rank deficient, so
                    // R is often singular; a tiny ridge selects the small-norm
                    // minimizer before falling back to the pseudo-inverse.
                    match solve_spd(&k, &rhs) {
                        Ok(u) => u,
                        Err(_) => {
                            let mut kj = k.clone();
                            kj.add_diag(JITTER * k.trace().max(f64::MIN_POSITIVE) / p as f64);
                            match solve_spd(&kj, &rhs) {
                                Ok(u) => u,
                                Err(_) => pseudo_inverse(&k, DEFAULT_PINV_TOL)?.matvec(&rhs)?,
                            }
                        }
                    }
                }
            }
        };
        let v = self.dual_from_primal(&u)?;
        Ok((u, v))
    }

    /// Inner maximizer `M⁻¹(b − Au)`.
    pub fn dual_from_primal(&self, u: &[f64]) -> Result<Vec<f64>> {
        let l = cholesky(&self.m)?;
        let au = self.a.matvec(u)?;
        let r: Vec<f64> = self.b.iter().zip(&au).map(|(b, a)| b - a).collect();
        Ok(backward_substitute_t(&l, &forward_substitute(&l, &r)))
    }

    /// Largest singular value of the operator's linear part, by power iteration.
    fn operator_norm(&self, lambda: f64) -> Result<f64> {
        let (p, q) = (self.primal_dim(), self.dual_dim());
        let apply = |u: &[f64], v: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            let (gu, mut gv) = self.operator(u, v, lambda)?;
            gv.iter_mut().zip(&self.b).for_each(|(g, b)| *g += b);
            Ok((gu, gv))
        };
        // Jᵀ applied through the adjoint structure: Jᵀ = [[λR, Aᵀ], [−A, M]].
        let apply_t = |u: &[f64], v: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut gu = self.apply_r(u)?;
            let atv = self.a.matvec_t(v)?;
            for (g, a) in gu.iter_mut().zip(&atv) {
                *g = lambda * *g + a;
            }
            let au = self.a.matvec(u)?;
            let mut gv = self.m.matvec(v)?;
            for (g, a) in gv.iter_mut().zip(&au) {
                *g -= a;
            }
            Ok((gu, gv))
        };
        let mut u: Vec<f64> = (0..p).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let mut v: Vec<f64> = (0..q).map(|i| 1.0 + (i as f64 * 0.73).cos()).collect();
        let mut sigma = 0.0;
        for _ in 0..200 {
            let norm = (dot(&u, &u) + dot(&v, &v)).sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            u.iter_mut().chain(v.iter_mut()).for_each(|x| *x /= norm);
            let (ju, jv) = apply(&u, &v)?;
            let (nu, nv) = apply_t(&ju, &jv)?;
            let s = (dot(&nu, &nu) + dot(&nv, &nv)).sqrt().sqrt();
            let converged = (s - sigma).abs() <= 1e-6 * s;
            sigma = s;
            u = nu;
            v = nv;
            if converged {
                break;
            }
        }
        Ok(sigma)
    }

    /// Extragradient with a constant step. Returns `(u, v, iterations, residual)`.
    pub fn solve_extragradient(&self, lambda: f64, cfg: &GdaConfig) -> Result<(Vec<f64>, Vec<f64>, usize, f64)> {
        let (p, q) = (self.primal_dim(), self.dual_dim());
        let eta = match cfg.step {
            Some(s) if s > 0.0 => s,
            Some(s) => return Err(Error::config("gda.step", format!("must be positive, got {s}"))),
            None => {
                let norm = self.operator_norm(lambda)?;
                if norm == 0.0 {
                    return Ok((vec![0.0; p], vec![0.0; q], 0, 0.0));
                }
                0.5 / norm
            }
        };
        let threshold = cfg.tol * norm2(&self.b).max(1.0);
        let mut u = vec![0.0; p];
        let mut v = vec![0.0; q];
        let mut avg_u = vec![0.0; p];
        let mut avg_v = vec![0.0; q];
        let mut residual = f64::INFINITY;
        for it in 0..cfg.max_iters {
            let (gu, gv) = self.operator(&u, &v, lambda)?;
            residual = (dot(&gu, &gu) + dot(&gv, &gv)).sqrt();
            if !residual.is_finite() {
                return Err(Error::NonFinite(format!("extragradient diverged at iteration {it}")));
            }
            if !cfg.average && residual < threshold {
                return Ok((u, v, it, residual));
            }
            let hu: Vec<f64> = u.iter().zip(&gu).map(|(x, g)| x - eta * g).collect();
            let hv: Vec<f64> = v.iter().zip(&gv).map(|(x, g)| x - eta * g).collect();
            let (gu2, gv2) = self.operator(&hu, &hv, lambda)?;
            u.iter_mut().zip(&gu2).for_each(|(x, g)| *x -= eta * g);
            v.iter_mut().zip(&gv2).for_each(|(x, g)| *x -= eta * g);
            if cfg.average {
                let k = (it + 1) as f64;
                avg_u.iter_mut().zip(&hu).for_each(|(a, x)| *a += (x - *a) / k);
                avg_v.iter_mut().zip(&hv).for_each(|(a, x)| *a += (x - *a) / k);
                let r = self.kkt_residual(&avg_u, &avg_v, lambda)?;
                if r < threshold {
                    return Ok((avg_u, avg_v, it + 1, r));
                }
                residual = r;
            }
        }
        let (last_primal, last_dual) = if cfg.average { (avg_u, avg_v) } else { (u, v) };
        Err(Error::NotConverged {
            iterations: cfg.max_iters,
            residual,
            last_primal,
            last_dual,
        })
    }

    /// Solves with the configured method and reports diagnostics.
    pub fn solve(&self, lambda: f64, solver: &SolverConfig) -> Result<(Vec<f64>, Vec<f64>, Diagnostics)> {
        let (u, v, iterations) = match solver.method {
            Method::ClosedForm => {
                let (u, v) = self.solve_closed_form(lambda)?;
                (u, v, 0)
            }
            Method::Gda => {
                let (u, v, it, _) = self.solve_extragradient(lambda, &solver.gda)?;
                (u, v, it)
            }
        };
        let diagnostics = Diagnostics {
            method: solver.method,
            iterations,
            gap: self.kkt_residual(&u, &v, lambda)?,
            objective: self.objective(&u, &v, lambda)?,
        };
        Ok((u, v, diagnostics))
    }
}

/// Normalized weights, `1/n` when absent.
pub(crate) fn normalized_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(
                    "weights must be n finite nonnegative values".into(),
                ));
            }
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(Error::InvalidArgument("weights sum to zero".into()));
            }
            Ok(w.iter().map(|v| v / s).collect())
        }
        None => Ok(vec![1.0 / n as f64; n]),
    }
}

pub(crate) fn scale_rows(m: &Matrix, w: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (i, wi) in w.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= wi);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_problem(seed: u64, n: usize, p: usize, q: usize, kind: RegularizerKind) -> MomentProblem {
        let mut rng = SeededRng::new(seed);
        let f = Matrix::from_vec(n, p, (0..n * p).map(|_| rng.normal()).collect()).unwrap();
        let mut h = Matrix::zeros(n, q);
        for i in 0..n {
            for j in 0..q {
                // Dual features correlated with the primal ones.
                let base = if j < p { f.get(i, j) } else { 0.0 };
                h.set(i, j, 0.7 * base + rng.normal());
            }
        }
        let y: Vec<f64> = (0..n)
            .map(|i| f.get(i, 0) * 1.5 - f.get(i, p - 1) + rng.normal())
            .collect();
        MomentProblem::from_samples(&f, &h, &y, None, kind).unwrap()
    }

    #[test]
    fn closed_form_is_stationary() {
        for kind in [RegularizerKind::ParamL2, RegularizerKind::FunctionL2] {
            let prob = random_problem(1, 300, 3, 4, kind);
            let (u, v) = prob.solve_closed_form(0.1).unwrap();
            assert!(prob.kkt_residual(&u, &v, 0.1).unwrap() < 1e-10);
        }
    }

    #[test]
    fn extragradient_matches_closed_form() {
        let prob = random_problem(2, 500, 3, 3, RegularizerKind::ParamL2);
        let (u, _) = prob.solve_closed_form(0.05).unwrap();
        let (ug, _, it, _) = prob.solve_extragradient(0.05, &GdaConfig::default()).unwrap();
        assert!(it > 0);
        let d: f64 = u.iter().zip(&ug).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn non_convergence_carries_iterate() {
        let prob = random_problem(3, 100, 2, 2, RegularizerKind::ParamL2);
        let cfg = GdaConfig {
            max_iters: 3,
            ..GdaConfig::default()
        };
        match prob.solve_extragradient(0.1, &cfg) {
            Err(Error::NotConverged {
                last_primal,
                iterations,
                ..
            }) => {
                assert_eq!(iterations, 3);
                assert_eq!(last_primal.len(), 2);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        for kind in [RegularizerKind::ParamL2, RegularizerKind::FunctionL2] {
            let prob = random_problem(4, 200, 3, 3, kind);
            let (u, _) = prob.solve_closed_form(1e6).unwrap();
            assert!(norm2(&u) < 1e-3);
        }
    }

    #[test]
    fn zero_lambda_gives_min_norm_solution() {
        // Two identical primal features: the minimum-norm solution splits
        // the coefficient evenly.
        let mut rng = SeededRng::new(5);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let f = Matrix::from_vec(n, 2, x.iter().flat_map(|v| [*v, *v]).collect()).unwrap();
        let h = Matrix::column(&x);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let prob = MomentProblem::from_samples(&f, &h, &y, None, RegularizerKind::ParamL2).unwrap();
        let (u, _) = prob.solve_closed_form(0.0).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-6 && (u[1] - 1.0).abs() < 1e-6, "{u:?}");
    }

    #[test]
    fn degenerate_dual_is_singular() {
        let f = Matrix::column(&[1.0, 2.0]);
        let h = Matrix::zeros(2, 1);
        let prob = MomentProblem::from_samples(&f, &h, &[1.0, 2.0], None, RegularizerKind::ParamL2).unwrap();
        assert!(matches!(prob.solve_closed_form(0.1), Err(Error::Singular(_))));
    }

    #[test]
    fn convex_concave_two_point_checks() {
        let prob = random_problem(6, 300, 3, 4, RegularizerKind::FunctionL2);
        let mut rng = SeededRng::new(7);
        let lambda = 0.01;
        for _ in 0..50 {
            let u1: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let u2: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let v1: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let v2: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let t = rng.uniform();
            let um: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let vm: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let l = |u: &[f64], v: &[f64]| prob.objective(u, v, lambda).unwrap();
            assert!(l(&um, &v1) <= t * l(&u1, &v1) + (1.0 - t) * l(&u2, &v1) + 1e-12);
            assert!(l(&u1, &vm) >= t * l(&u1, &v1) + (1.0 - t) * l(&u1, &v2) - 1e-12);
        }
    }
}
