//! Minibatch contrastive training with in-batch negatives.

use serde::{Deserialize, Serialize};

use crate::benchdata::{Dataset, Setting};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neuralnet::{AdamConfig, AdamState, ParamSlot};
use crate::rng::SeededRng;

use super::losses::{loss_on_raw_scores, LossKind};
use super::tensor::Tensor3;
use super::{ConditionalSetting, FactoredRepresentation, IvRepresentation, Representation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Iv,
    IvocX,
    IvocY,
    PclW,
    PclY,
}

impl Stage {
    pub fn is_outcome(self) -> bool {
        matches!(self, Stage::IvocY | Stage::PclY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::L2,
            epochs: 50,
            batch_size: 256,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 for in-batch negatives"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Runs `epochs` passes over shuffled minibatches and records the mean loss
/// of each pass.
fn run_epochs(n: usize, cfg: &TrainConfig, mut step: impl FnMut(&[usize]) -> Result<f64>) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 training rows, got {n}"
        )));
    }
    let bs = cfg.batch_size.min(n);
    let mut rng = SeededRng::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let perm = rng.permutation(n);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in perm.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            total += step(chunk)?;
            count += 1;
        }
        trace.push(total / count as f64);
    }
    Ok(trace)
}

fn check_rows(ctx: &str, mats: &[&Matrix]) -> Result<usize> {
    let n = mats[0].rows();
    if let Some(m) = mats.iter().find(|m| m.rows() != n) {
        return Err(Error::dim(ctx, format!("{} rows vs {n}", m.rows())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{ctx}: empty training data")));
    }
    Ok(n)
}

/// Fits `(φ, ψ)` so that `⟨φ(x), ψ(z)⟩` tracks `p(x|z) / p(x)`.
pub fn train_iv(rep: &mut IvRepresentation, x: &Matrix, z: &Matrix, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let n = check_rows("train_iv", &[x, z])?;
    let mut adam = AdamState::new(cfg.optimizer);
    run_epochs(n, cfg, |idx| {
        let xb = x.select_rows(idx);
        let zb = z.select_rows(idx);
        let (pf, pc) = rep.phi.forward_train(&xb)?;
        let (qf, qc) = rep.psi.forward_train(&zb)?;
        let s = pf.matmul_nt(&qf)?;
        let (value, ds) = loss_on_raw_scores(cfg.loss, &s)?;
        let (gphi, _) = rep.phi.backward(&pc, &ds.matmul(&qf)?)?;
        let (gpsi, _) = rep.psi.backward(&qc, &ds.matmul_tn(&pf)?)?;
        let mut slots = rep.phi.param_slots("phi.");
        slots.extend(rep.psi.param_slots("psi."));
        let mut grads = gphi.slices();
        grads.extend(gpsi.slices());
        adam.step(&mut slots, &grads)?;
        Ok(value)
    })
}

/// Fits `(φ, ψ, ξ, P_V)` so that `φ(a)ᵀ V(c) ψ(b)` tracks `p(a|b,c) / p(a)`.
pub fn train_target_stage(
    rep: &mut FactoredRepresentation,
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let n = check_rows("train_target_stage", &[a, b, c])?;
    let mut adam = AdamState::new(cfg.optimizer);
    let dx = rep.d_x();
    run_epochs(n, cfg, |idx| {
        let m = idx.len();
        let (lf, lc) = rep.phi.forward_train(&a.select_rows(idx))?;
        let (psi, psic) = rep.psi.forward_train(&b.select_rows(idx))?;
        let (xi, xic) = rep.xi.forward_train(&c.select_rows(idx))?;
        let vs = (0..m).map(|j| rep.p_v.mode3(xi.row(j))).collect::<Result<Vec<_>>>()?;
        let mut t = Matrix::zeros(m, dx);
        for (j, v) in vs.iter().enumerate() {
            t.row_mut(j).copy_from_slice(&v.matvec(psi.row(j))?);
        }
        let s = lf.matmul_nt(&t)?;
        let (value, ds) = loss_on_raw_scores(cfg.loss, &s)?;
        let dl = ds.matmul(&t)?;
        let dt = ds.matmul_tn(&lf)?;
        let mut gpv = Tensor3::zeros(rep.p_v.dims[0], rep.p_v.dims[1], rep.p_v.dims[2]);
        let mut dpsi = Matrix::zeros(m, psi.cols());
        let mut dxi = Matrix::zeros(m, xi.cols());
        for j in 0..m {
            let dtj = dt.row(j);
            dpsi.row_mut(j).copy_from_slice(&vs[j].matvec_t(dtj)?);
            let dv = outer(dtj, psi.row(j));
            dxi.row_mut(j)
                .copy_from_slice(&rep.p_v.mode3_backward(xi.row(j), &dv, &mut gpv));
        }
        let (gphi, _) = rep.phi.backward(&lc, &dl)?;
        let (gpsi, _) = rep.psi.backward(&psic, &dpsi)?;
        let (gxi, _) = rep.xi.backward(&xic, &dxi)?;
        let FactoredRepresentation { phi, psi, xi, p_v, .. } = rep;
        let mut slots = phi.param_slots("phi.");
        slots.extend(psi.param_slots("psi."));
        slots.extend(xi.param_slots("xi."));
        slots.push(ParamSlot::new("p_v", &mut p_v.data));
        let mut grads = gphi.slices();
        grads.extend(gpsi.slices());
        grads.extend(gxi.slices());
        grads.push(&gpv.data);
        adam.step(&mut slots, &grads)?;
        Ok(value)
    })
}

/// Fits the outcome factorization `ν(y)ᵀ Q(c)ᵀ V(c) ψ(b)`.
///
/// With `joint == false` only `(ν, P_Q)` move and `V(c) ψ(b)` is taken from
/// the already-trained target stage. With `joint == true`, `ψ`, `ξ` and `P_V`
/// are trained together with `(ν, P_Q)` and the target factorization is not
/// needed.
pub fn train_outcome_stage(
    rep: &mut FactoredRepresentation,
    y: &Matrix,
    b: &Matrix,
    c: &Matrix,
    cfg: &TrainConfig,
    joint: bool,
) -> Result<Vec<f64>> {
    let n = check_rows("train_outcome_stage", &[y, b, c])?;
    let mut adam = AdamState::new(cfg.optimizer);
    let (dx, dy) = (rep.d_x(), rep.d_y());
    let frozen = if joint {
        None
    } else {
        Some((rep.conditioned_features(b, c)?, rep.xi.predict(c)?))
    };
    run_epochs(n, cfg, |idx| {
        let m = idx.len();
        let (nf, nc) = rep.nu.forward_train(&y.select_rows(idx))?;
        let mut psi_pass = None;
        let mut vs = Vec::new();
        let (r, xi) = match &frozen {
            Some((r_all, xi_all)) => (r_all.select_rows(idx), xi_all.select_rows(idx)),
            None => {
                let (psi, psic) = rep.psi.forward_train(&b.select_rows(idx))?;
                let (xi, xic) = rep.xi.forward_train(&c.select_rows(idx))?;
                vs = (0..m).map(|j| rep.p_v.mode3(xi.row(j))).collect::<Result<Vec<_>>>()?;
                let mut r = Matrix::zeros(m, dx);
                for (j, v) in vs.iter().enumerate() {
                    r.row_mut(j).copy_from_slice(&v.matvec(psi.row(j))?);
                }
                psi_pass = Some((psi, psic, xic));
                (r, xi)
            }
        };
        let qs = (0..m).map(|j| rep.p_q.mode3(xi.row(j))).collect::<Result<Vec<_>>>()?;
        let mut t = Matrix::zeros(m, dy);
        for (j, q) in qs.iter().enumerate() {
            t.row_mut(j).copy_from_slice(&q.matvec_t(r.row(j))?);
        }
        let s = nf.matmul_nt(&t)?;
        let (value, ds) = loss_on_raw_scores(cfg.loss, &s)?;
        let dn = ds.matmul(&t)?;
        let dt = ds.matmul_tn(&nf)?;
        let mut gpq = Tensor3::zeros(rep.p_q.dims[0], rep.p_q.dims[1], rep.p_q.dims[2]);
        let mut dxi = Matrix::zeros(m, xi.cols());
        let mut dr = Matrix::zeros(m, dx);
        for j in 0..m {
            let dq = outer(r.row(j), dt.row(j));
            let g = rep.p_q.mode3_backward(xi.row(j), &dq, &mut gpq);
            dxi.row_mut(j).copy_from_slice(&g);
            dr.row_mut(j).copy_from_slice(&qs[j].matvec(dt.row(j))?);
        }
        let (gnu, _) = rep.nu.backward(&nc, &dn)?;
        match psi_pass {
            None => {
                let FactoredRepresentation { nu, p_q, .. } = rep;
                let mut slots = nu.param_slots("nu.");
                slots.push(ParamSlot::new("p_q", &mut p_q.data));
                let mut grads = gnu.slices();
                grads.push(&gpq.data);
                adam.step(&mut slots, &grads)?;
            }
            Some((psi, psic, xic)) => {
                let mut gpv = Tensor3::zeros(rep.p_v.dims[0], rep.p_v.dims[1], rep.p_v.dims[2]);
                let mut dpsi = Matrix::zeros(m, psi.cols());
                for j in 0..m {
                    dpsi.row_mut(j).copy_from_slice(&vs[j].matvec_t(dr.row(j))?);
                    let dv = outer(dr.row(j), psi.row(j));
                    let g = rep.p_v.mode3_backward(xi.row(j), &dv, &mut gpv);
                    for (a, b) in dxi.row_mut(j).iter_mut().zip(g) {
                        *a += b;
                    }
                }
                let (gpsi, _) = rep.psi.backward(&psic, &dpsi)?;
                let (gxi, _) = rep.xi.backward(&xic, &dxi)?;
                let FactoredRepresentation {
                    nu, psi, xi, p_v, p_q, ..
                } = rep;
                let mut slots = nu.param_slots("nu.");
                slots.extend(psi.param_slots("psi."));
                slots.extend(xi.param_slots("xi."));
                slots.push(ParamSlot::new("p_v", &mut p_v.data));
                slots.push(ParamSlot::new("p_q", &mut p_q.data));
                let mut grads = gnu.slices();
                grads.extend(gpsi.slices());
                grads.extend(gxi.slices());
                grads.push(&gpv.data);
                grads.push(&gpq.data);
                adam.step(&mut slots, &grads)?;
            }
        }
        Ok(value)
    })
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, av) in a.iter().enumerate() {
        for (v, bv) in m.row_mut(i).iter_mut().zip(b) {
            *v = av * bv;
        }
    }
    m
}

fn stack(a: &Matrix, extra: Option<&Matrix>) -> Result<Matrix> {
    match extra {
        Some(e) => a.vstack(e),
        None => Ok(a.clone()),
    }
}

/// Trains one factorization of `rep` on `data`.
///
/// Unlabeled rows (outcome ignored) are appended for every factorization that
/// does not involve `y`; supplying them to an outcome stage is an error. For
/// outcome stages `joint` selects joint training of the shared maps instead
/// of the sequential two-stage fit.
pub fn train_representation(
    stage: Stage,
    rep: &mut Representation,
    data: &Dataset,
    unlabeled: Option<&Dataset>,
    cfg: &TrainConfig,
    joint: bool,
) -> Result<TrainReport> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("empty training data".into()));
    }
    if stage.is_outcome() && unlabeled.is_some() {
        return Err(Error::InvalidArgument(format!(
            "unlabeled rows cannot be used for the {stage:?} factorization, which involves the outcome"
        )));
    }
    if let Some(u) = unlabeled {
        if u.setting != data.setting {
            return Err(Error::InvalidArgument("unlabeled data has a different setting".into()));
        }
    }
    let want = match stage {
        Stage::Iv => Setting::Iv,
        Stage::IvocX | Stage::IvocY => Setting::Ivoc,
        Stage::PclW | Stage::PclY => Setting::Pcl,
    };
    if data.setting != want {
        return Err(Error::InvalidArgument(format!(
            "{stage:?} needs a {want:?} dataset, got {:?}",
            data.setting
        )));
    }
    let col = |d: &Dataset, which: char| -> Matrix {
        match which {
            'o' => d.o.clone().expect("validated IV-OC dataset"),
            'w' => d.w.clone().expect("validated PCL dataset"),
            'x' => d.x.clone(),
            _ => d.z.clone(),
        }
    };
    let unl = |which: char| unlabeled.map(|u| col(u, which));
    let epoch_losses = match (stage, rep) {
        (Stage::Iv, Representation::Iv(r)) => {
            let x = stack(&data.x, unl('x').as_ref())?;
            let z = stack(&data.z, unl('z').as_ref())?;
            train_iv(r, &x, &z, cfg)?
        }
        (Stage::IvocX | Stage::PclW, Representation::Factored(r)) => {
            let (a, c) = if stage == Stage::IvocX { ('x', 'o') } else { ('w', 'x') };
            check_factored(r, stage)?;
            let av = stack(&col(data, a), unl(a).as_ref())?;
            let bv = stack(&data.z, unl('z').as_ref())?;
            let cv = stack(&col(data, c), unl(c).as_ref())?;
            train_target_stage(r, &av, &bv, &cv, cfg)?
        }
        (Stage::IvocY | Stage::PclY, Representation::Factored(r)) => {
            check_factored(r, stage)?;
            let c = if stage == Stage::IvocY { 'o' } else { 'x' };
            train_outcome_stage(r, &data.y, &data.z, &col(data, c), cfg, joint)?
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{stage:?} does not match the representation type"
            )))
        }
    };
    Ok(TrainReport { stage, epoch_losses })
}

fn check_factored(r: &FactoredRepresentation, stage: Stage) -> Result<()> {
    let want = match stage {
        Stage::IvocX | Stage::IvocY => ConditionalSetting::Ivoc,
        _ => ConditionalSetting::Pcl,
    };
    if r.setting != want {
        return Err(Error::InvalidArgument(format!(
            "{stage:?} on a {:?} representation",
            r.setting
        )));
    }
    Ok(())
}
