//! Fast self-checks run by the `check` subcommand: gradient verification,
//! algebraic identities and solver agreement on small random instances.

use serde::Serialize;

use crate::benchdata::{demand_f, demand_h, digit_index, LowRankIvModel};
use crate::error::Result;
use crate::linalg::{dot, kron, kron_apply, pseudo_inverse, Matrix, DEFAULT_PINV_TOL};
use crate::neuralnet::{grad_check, Activation, FeatureNetwork, NetworkSpec};
use crate::rng::SeededRng;
use crate::saddle::{GdaConfig, MomentProblem, RegularizerKind};
use crate::spectral_rep::{loss_on_raw_scores, LossKind};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, value: f64, tol: f64) -> CheckResult {
    CheckResult {
        name,
        passed: value.is_finite() && value < tol,
        detail: format!("max error {value:.3e} (tolerance {tol:.0e})"),
    }
}

fn normal_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).expect("sized")
}

/// Backpropagation against central differences through both contrastive
/// losses on randomized networks.
pub fn gradient_check(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let input = 1 + rng.index(6);
        let out = 1 + rng.index(8);
        let hidden: Vec<usize> = (0..rng.index(3)).map(|_| 2 + rng.index(15)).collect();
        let act = if t % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let net = FeatureNetwork::new(NetworkSpec::mlp(input, &hidden, out, act, Activation::Tanh), &mut rng)?;
        let n = 6;
        let batch = normal_matrix(&mut rng, n, input);
        let partner = normal_matrix(&mut rng, n, out);
        for kind in [LossKind::L2, LossKind::Mle] {
            let err = grad_check(&net, &batch, |o: &Matrix| {
                let (v, ds) = loss_on_raw_scores(kind, &o.matmul_nt(&partner)?)?;
                Ok((v, ds.matmul(&partner)?))
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// `φᵀBQβ = ⟨β vec(B)ᵀ, Qᵀ ⊗ φᵀ⟩_F` with column-major `vec`.
pub fn kronecker_identity(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let dx = 1 + rng.index(6);
        let dy = 1 + rng.index(6);
        let phi: Vec<f64> = (0..dx).map(|_| rng.normal()).collect();
        let b = normal_matrix(&mut rng, dx, dx);
        let q = normal_matrix(&mut rng, dx, dy);
        let beta: Vec<f64> = (0..dy).map(|_| rng.normal()).collect();
        let lhs = dot(&phi, &b.matvec(&q.matvec(&beta)?)?);
        let g = Matrix::column(&beta).matmul(&Matrix::row_vector(&b.vec_col_major()))?;
        let rhs = g.frobenius_dot(&kron(&q.transpose(), &Matrix::row_vector(&phi)))?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// `kron_apply` against the materialized Kronecker product.
pub fn kron_apply_check(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let dims: Vec<usize> = (0..4).map(|_| 1 + rng.index(5)).collect();
        let c = normal_matrix(&mut rng, dims[0], dims[1]);
        let d = normal_matrix(&mut rng, dims[2], dims[3]);
        let g = normal_matrix(&mut rng, dims[1], dims[3]);
        let fast = kron_apply(&c, &d, &g)?;
        let brute = kron(&c, &d).matvec(g.as_slice())?;
        for (a, b) in fast.as_slice().iter().zip(&brute) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// The four Penrose identities on random, partly rank-deficient matrices.
pub fn penrose_check(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (r, c) = (1 + rng.index(5), 1 + rng.index(5));
        let mut m = normal_matrix(&mut rng, r, c);
        if t % 2 == 1 && c > 1 {
            for i in 0..r {
                let v = m.get(i, 0);
                m.set(i, c - 1, 2.0 * v);
            }
        }
        let p = pseudo_inverse(&m, DEFAULT_PINV_TOL)?;
        let mpm = m.matmul(&p)?.matmul(&m)?;
        let pmp = p.matmul(&m)?.matmul(&p)?;
        let mp = m.matmul(&p)?;
        let pm = p.matmul(&m)?;
        let errs = [
            mpm.sub(&m)?.max_abs(),
            pmp.sub(&p)?.max_abs(),
            mp.sub(&mp.transpose())?.max_abs(),
            pm.sub(&pm.transpose())?.max_abs(),
        ];
        worst = errs.iter().fold(worst, |a, b| a.max(*b));
    }
    Ok(worst)
}

/// On exact low-rank models, `E[f(X)|Z=z] = ⟨ψ(z), v_f⟩` with
/// `v_f = Σ_x p(x) f(x) φ(x)`.
pub fn linearization_check(seed: u64, instances: usize, functions: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (nx, nz) = (2 + rng.index(6), 2 + rng.index(6));
        let rank = 1 + rng.index(nx.min(nz));
        let model = LowRankIvModel::random(nx, nz, rank, &mut rng);
        let joint = model.joint();
        let px = model.px();
        let (phi, psi) = (model.phi(), model.psi());
        for _ in 0..functions {
            let f: Vec<f64> = (0..nx).map(|_| rng.normal()).collect();
            let mut v = vec![0.0; rank];
            for x in 0..nx {
                for (r, vr) in v.iter_mut().enumerate() {
                    *vr += px[x] * f[x] * phi.get(x, r);
                }
            }
            for z in 0..nz {
                let pz: f64 = (0..nx).map(|x| joint[x][z]).sum();
                let brute: f64 = (0..nx).map(|x| f[x] * joint[x][z]).sum::<f64>() / pz;
                worst = worst.max((brute - dot(psi.row(z), &v)).abs());
            }
        }
    }
    Ok(worst)
}

/// Closed form against extragradient on random well-conditioned problems.
pub fn solver_agreement(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = 1 + rng.index(5);
        let n = 2_000;
        let phi = normal_matrix(&mut rng, n, d);
        let psi = phi.add(&normal_matrix(&mut rng, n, d))?;
        let coef: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|i| dot(phi.row(i), &coef) + rng.normal()).collect();
        let prob = MomentProblem::from_samples(&phi, &psi, &y, None, RegularizerKind::ParamL2)?;
        let (u, _) = prob.solve_closed_form(0.01)?;
        let (ug, _, _, _) = prob.solve_extragradient(0.01, &GdaConfig::default())?;
        let d2: f64 = u.iter().zip(&ug).map(|(a, b)| (a - b).powi(2)).sum();
        worst = worst.max(d2.sqrt());
    }
    Ok(worst)
}

/// Hand-evaluated generator values.
pub fn generator_fixtures() -> f64 {
    let checks = [
        (demand_h(5.0), -1.0),
        (demand_h(0.0), -1.916_666_666_666_666_7),
        (demand_h(10.0), 0.083_333_333_333_333_33),
        (demand_f(25.0, 5.0, 4.0), -90.0),
        (demand_f(0.0, 5.0, 1.0), 90.0),
        (demand_f(20.0, 10.0, 7.0), 77.5),
        (digit_index(0.0) as f64, 5.0),
        (digit_index(4.0) as f64, 9.0),
        (digit_index(-4.0) as f64, 0.0),
    ];
    checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Runs every check with seeds derived from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let wrap = |name: &'static str, tol: f64, r: Result<f64>| match r {
        Ok(v) => result(name, v, tol),
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    };
    vec![
        wrap("gradient", 1e-4, gradient_check(seed, 10)),
        wrap(
            "kronecker_identity",
            1e-10,
            kronecker_identity(seed.wrapping_add(1), 100),
        ),
        wrap("kron_apply", 1e-10, kron_apply_check(seed.wrapping_add(2), 50)),
        wrap("pseudo_inverse", 1e-8, penrose_check(seed.wrapping_add(3), 50)),
        wrap(
            "linearization",
            1e-10,
            linearization_check(seed.wrapping_add(4), 20, 10),
        ),
        wrap("closed_form_vs_gda", 1e-4, solver_agreement(seed.wrapping_add(5), 5)),
        result("generator_fixtures", generator_fixtures(), 1e-6),
    ]
}
