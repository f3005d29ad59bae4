//! Contrastive low-rank factorizations of conditional densities.
//!
//! IV learns `p(x|z) / p(x) ≈ ⟨φ(x), ψ(z)⟩`. The conditioned settings learn
//! `p(a|b,c) / p(a) ≈ φ(a)ᵀ V(c) ψ(b)` and
//! `p(y|b,c) / p(y) ≈ ν(y)ᵀ Q(c)ᵀ V(c) ψ(b)` with `V(c) = P_V ×₃ ξ(c)` and
//! `Q(c) = P_Q ×₃ ξ(c)`. For IV-OC `(a, b, c) = (x, z, o)`; for PCL
//! `(a, b, c) = (w, z, x)`.

mod losses;
mod tensor;
mod train;

pub use losses::{contrastive_l2_loss, contrastive_mle_loss, link, loss_on_raw_scores, sigmoid, softplus, LossKind};
pub use tensor::Tensor3;
pub use train::{
    train_iv, train_outcome_stage, train_representation, train_target_stage, Stage, TrainConfig, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neuralnet::{FeatureNetwork, NetworkSpec};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalSetting {
    Ivoc,
    Pcl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvRepresentation {
    pub phi: FeatureNetwork,
    pub psi: FeatureNetwork,
}

impl IvRepresentation {
    pub fn new(phi: NetworkSpec, psi: NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        let phi = FeatureNetwork::new(phi, rng)?;
        let psi = FeatureNetwork::new(psi, rng)?;
        Self::from_networks(phi, psi)
    }

    pub fn from_networks(phi: FeatureNetwork, psi: FeatureNetwork) -> Result<Self> {
        if phi.output_dim() != psi.output_dim() {
            return Err(Error::dim(
                "IvRepresentation",
                format!(
                    "phi outputs {} dims, psi outputs {}",
                    phi.output_dim(),
                    psi.output_dim()
                ),
            ));
        }
        Ok(IvRepresentation { phi, psi })
    }

    pub fn d(&self) -> usize {
        self.phi.output_dim()
    }
}

/// `scores[i][j] = ⟨φ(x_i), ψ(z_j)⟩` with eval-mode networks.
pub fn score_iv(rep: &IvRepresentation, x: &Matrix, z: &Matrix) -> Result<Matrix> {
    if x.rows() != z.rows() {
        return Err(Error::dim(
            "score_iv",
            format!("{} x rows vs {} z rows", x.rows(), z.rows()),
        ));
    }
    rep.phi.predict(x)?.matmul_nt(&rep.psi.predict(z)?)
}

/// Ratio estimates `r(x_i, z_j)` for every pair. Likelihood-trained scores
/// are only identified up to a per-`x` factor, which is fixed by requiring
/// the ratio to average one over `z_reference`.
pub fn iv_ratio_table(
    rep: &IvRepresentation,
    kind: LossKind,
    x: &Matrix,
    z: &Matrix,
    z_reference: &Matrix,
) -> Result<Matrix> {
    let phi = rep.phi.predict(x)?;
    let raw = phi.matmul_nt(&rep.psi.predict(z)?)?;
    let reference = match kind {
        LossKind::L2 => None,
        LossKind::Mle => Some(phi.matmul_nt(&rep.psi.predict(z_reference)?)?),
    };
    calibrate(kind, raw, reference.as_ref())
}

fn calibrate(kind: LossKind, mut raw: Matrix, reference: Option<&Matrix>) -> Result<Matrix> {
    match (kind, reference) {
        (LossKind::L2, _) => Ok(raw),
        (LossKind::Mle, Some(r)) => {
            if r.cols() == 0 {
                return Err(Error::InvalidArgument("empty calibration reference".into()));
            }
            for i in 0..raw.rows() {
                let norm = r.row(i).iter().map(|v| softplus(*v)).sum::<f64>() / r.cols() as f64;
                raw.row_mut(i).iter_mut().for_each(|v| *v = softplus(*v) / norm);
            }
            Ok(raw)
        }
        (LossKind::Mle, None) => unreachable!("reference computed for likelihood scores"),
    }
}

/// Network specs for the four feature maps of a conditioned factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredSpecs {
    pub phi: NetworkSpec,
    pub psi: NetworkSpec,
    pub xi: NetworkSpec,
    pub nu: NetworkSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredRepresentation {
    pub setting: ConditionalSetting,
    /// Target variable: `x` for IV-OC, `w` for PCL.
    pub phi: FeatureNetwork,
    pub psi: FeatureNetwork,
    /// Conditioning variable: `o` for IV-OC, `x` for PCL.
    pub xi: FeatureNetwork,
    pub nu: FeatureNetwork,
    pub p_v: Tensor3,
    pub p_q: Tensor3,
}

impl FactoredRepresentation {
    pub fn new(setting: ConditionalSetting, specs: FactoredSpecs, rng: &mut SeededRng) -> Result<Self> {
        let phi = FeatureNetwork::new(specs.phi, rng)?;
        let psi = FeatureNetwork::new(specs.psi, rng)?;
        let xi = FeatureNetwork::new(specs.xi, rng)?;
        let nu = FeatureNetwork::new(specs.nu, rng)?;
        let (dx, dz, d_o, dy) = (phi.output_dim(), psi.output_dim(), xi.output_dim(), nu.output_dim());
        let p_v = Tensor3::random(dx, dz, d_o, rng);
        let p_q = Tensor3::random(dx, dy, d_o, rng);
        Self::from_parts(setting, phi, psi, xi, nu, p_v, p_q)
    }

    pub fn from_parts(
        setting: ConditionalSetting,
        phi: FeatureNetwork,
        psi: FeatureNetwork,
        xi: FeatureNetwork,
        nu: FeatureNetwork,
        p_v: Tensor3,
        p_q: Tensor3,
    ) -> Result<Self> {
        let want_v = [phi.output_dim(), psi.output_dim(), xi.output_dim()];
        let want_q = [phi.output_dim(), nu.output_dim(), xi.output_dim()];
        if p_v.dims != want_v {
            return Err(Error::dim(
                "FactoredRepresentation",
                format!("P_V dims {:?}, networks need {want_v:?}", p_v.dims),
            ));
        }
        if p_q.dims != want_q {
            return Err(Error::dim(
                "FactoredRepresentation",
                format!("P_Q dims {:?}, networks need {want_q:?}", p_q.dims),
            ));
        }
        Ok(FactoredRepresentation {
            setting,
            phi,
            psi,
            xi,
            nu,
            p_v,
            p_q,
        })
    }

    pub fn d_x(&self) -> usize {
        self.phi.output_dim()
    }
    pub fn d_z(&self) -> usize {
        self.psi.output_dim()
    }
    pub fn d_o(&self) -> usize {
        self.xi.output_dim()
    }
    pub fn d_y(&self) -> usize {
        self.nu.output_dim()
    }

    /// `V(c)` for each row of the conditioning batch.
    pub fn v_matrices(&self, c: &Matrix) -> Result<Vec<Matrix>> {
        let xi = self.xi.predict(c)?;
        (0..xi.rows()).map(|i| self.p_v.mode3(xi.row(i))).collect()
    }

    /// `Q(c)` for each row of the conditioning batch.
    pub fn q_matrices(&self, c: &Matrix) -> Result<Vec<Matrix>> {
        let xi = self.xi.predict(c)?;
        (0..xi.rows()).map(|i| self.p_q.mode3(xi.row(i))).collect()
    }

    /// Rows `V(c_i) ψ(b_i)`.
    pub fn conditioned_features(&self, b: &Matrix, c: &Matrix) -> Result<Matrix> {
        same_rows("conditioned_features", b, c)?;
        let psi = self.psi.predict(b)?;
        let vs = self.v_matrices(c)?;
        let mut out = Matrix::zeros(b.rows(), self.d_x());
        for (i, v) in vs.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&v.matvec(psi.row(i))?);
        }
        Ok(out)
    }

    /// Rows `Q(c_i)ᵀ V(c_i) ψ(b_i)`: the dual features of the saddle problem.
    pub fn outcome_features(&self, b: &Matrix, c: &Matrix) -> Result<Matrix> {
        let r = self.conditioned_features(b, c)?;
        let qs = self.q_matrices(c)?;
        let mut out = Matrix::zeros(b.rows(), self.d_y());
        for (i, q) in qs.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&q.matvec_t(r.row(i))?);
        }
        Ok(out)
    }

    /// `scores[i][j] = φ(a_i)ᵀ V(c_j) ψ(b_j)`.
    pub fn target_scores(&self, a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
        same_rows("target_scores", a, b)?;
        self.phi.predict(a)?.matmul_nt(&self.conditioned_features(b, c)?)
    }

    /// `scores[i][j] = ν(y_i)ᵀ Q(c_j)ᵀ V(c_j) ψ(b_j)`.
    pub fn outcome_scores(&self, y: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
        same_rows("outcome_scores", y, b)?;
        self.nu.predict(y)?.matmul_nt(&self.outcome_features(b, c)?)
    }

    fn expect(&self, setting: ConditionalSetting, op: &str) -> Result<()> {
        if self.setting != setting {
            return Err(Error::InvalidArgument(format!(
                "{op} called on a {:?} representation",
                self.setting
            )));
        }
        Ok(())
    }
}

fn same_rows(ctx: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::dim(ctx, format!("{} rows vs {} rows", a.rows(), b.rows())));
    }
    Ok(())
}

fn single(rep: &FactoredRepresentation, left: &[f64], b: &[f64], c: &[f64], outcome: bool) -> Result<f64> {
    let l = Matrix::row_vector(left);
    let b = Matrix::row_vector(b);
    let c = Matrix::row_vector(c);
    let s = if outcome {
        rep.outcome_scores(&l, &b, &c)?
    } else {
        rep.target_scores(&l, &b, &c)?
    };
    Ok(s.get(0, 0))
}

/// `φ(x)ᵀ V(o) ψ(z)`.
pub fn score_ivoc_x(rep: &FactoredRepresentation, x: &[f64], z: &[f64], o: &[f64]) -> Result<f64> {
    rep.expect(ConditionalSetting::Ivoc, "score_ivoc_x")?;
    single(rep, x, z, o, false)
}

/// `ν(y)ᵀ Q(o)ᵀ V(o) ψ(z)`.
pub fn score_ivoc_y(rep: &FactoredRepresentation, y: &[f64], z: &[f64], o: &[f64]) -> Result<f64> {
    rep.expect(ConditionalSetting::Ivoc, "score_ivoc_y")?;
    single(rep, y, z, o, true)
}

/// `φ(w)ᵀ V(x) ψ(z)`.
pub fn score_pcl_w(rep: &FactoredRepresentation, w: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    rep.expect(ConditionalSetting::Pcl, "score_pcl_w")?;
    single(rep, w, z, x, false)
}

/// `ν(y)ᵀ Q(x)ᵀ V(x) ψ(z)`.
pub fn score_pcl_y(rep: &FactoredRepresentation, y: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
    rep.expect(ConditionalSetting::Pcl, "score_pcl_y")?;
    single(rep, y, z, x, true)
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Representation {
    Iv(IvRepresentation),
    Factored(FactoredRepresentation),
}
