//! Binary checkpoints for networks, representations and fitted solutions.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SPCAUSAL"
//! version      u8       1
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON
//! array_count  u32
//! per array:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   rank       u8
//!   dims       rank x u64
//!   data       prod(dims) x f64 (IEEE-754, LE)
//! ```
//!
//! Arrays appear in declaration order: every network's layers (weight,
//! bias, then batch-norm gamma, beta, running mean, running variance), then
//! `P_V` and `P_Q`, then the solution (`u`, `v` or `G`, `w`) and its
//! `solution.scalars` array `[lambda, gap, objective]`. Floats never pass
//! through text, so a save/load cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neuralnet::{BatchNorm, DenseLayer, FeatureNetwork, InputTransform, NetworkParams, NetworkSpec};
use crate::saddle::{Diagnostics, FactoredSolution, IvSolution, Method, RegularizerKind, Solution};
use crate::spectral_rep::{ConditionalSetting, FactoredRepresentation, IvRepresentation, Representation, Tensor3};

pub const MAGIC: &[u8; 8] = b"SPCAUSAL";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::dim(
                "NamedArray",
                format!("{name}: dims {dims:?} but {} values", data.len()),
            ));
        }
        Ok(NamedArray { name, dims, data })
    }

    fn vector(name: impl Into<String>, data: &[f64]) -> Self {
        NamedArray {
            name: name.into(),
            dims: vec![data.len()],
            data: data.to_vec(),
        }
    }

    fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        NamedArray {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::Format(format!(
                "array {} has rank {}, expected 2",
                self.name,
                self.dims.len()
            ))),
        }
    }

    fn to_vector(&self) -> Result<Vec<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!(
                "array {} has rank {}, expected 1",
                self.name,
                self.dims.len()
            )));
        }
        Ok(self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkMeta {
    pub name: String,
    pub spec: NetworkSpec,
    pub input: Option<InputTransform>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    Iv,
    Factored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionMeta {
    pub kind: RepKind,
    pub setting: Option<ConditionalSetting>,
    pub regularizer: RegularizerKind,
    pub method: Method,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub networks: Vec<NetworkMeta>,
    pub representation: Option<RepKind>,
    pub setting: Option<ConditionalSetting>,
    pub solution: Option<SolutionMeta>,
    /// Free-form provenance (training config, loss traces, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

fn network_arrays(name: &str, net: &FeatureNetwork, out: &mut Vec<NamedArray>) {
    for (l, layer) in net.params.layers.iter().enumerate() {
        let p = format!("{name}.{l}");
        out.push(NamedArray::matrix(format!("{p}.weight"), &layer.weight));
        out.push(NamedArray::vector(format!("{p}.bias"), &layer.bias));
        if let Some(bn) = &layer.bn {
            out.push(NamedArray::vector(format!("{p}.bn.gamma"), &bn.gamma));
            out.push(NamedArray::vector(format!("{p}.bn.beta"), &bn.beta));
            out.push(NamedArray::vector(format!("{p}.bn.running_mean"), &bn.running_mean));
            out.push(NamedArray::vector(format!("{p}.bn.running_var"), &bn.running_var));
        }
    }
}

fn tensor_array(name: &str, t: &Tensor3) -> NamedArray {
    NamedArray {
        name: name.into(),
        dims: t.dims.to_vec(),
        data: t.data.clone(),
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, arrays: Vec<NamedArray>) -> Self {
        Checkpoint { meta, arrays }
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    }

    fn push_networks(meta: &mut CheckpointMeta, arrays: &mut Vec<NamedArray>, nets: &[(&str, &FeatureNetwork)]) {
        for (name, net) in nets {
            meta.networks.push(NetworkMeta {
                name: (*name).into(),
                spec: net.spec.clone(),
                input: net.input.clone(),
            });
            network_arrays(name, net, arrays);
        }
    }

    pub fn from_network(name: &str, net: &FeatureNetwork, extra: serde_json::Value) -> Self {
        let mut meta = CheckpointMeta {
            networks: vec![],
            representation: None,
            setting: None,
            solution: None,
            extra,
        };
        let mut arrays = vec![];
        Self::push_networks(&mut meta, &mut arrays, &[(name, net)]);
        Checkpoint { meta, arrays }
    }

    pub fn from_representation(rep: &Representation, extra: serde_json::Value) -> Self {
        let mut meta = CheckpointMeta {
            networks: vec![],
            representation: None,
            setting: None,
            solution: None,
            extra,
        };
        let mut arrays = vec![];
        match rep {
            Representation::Iv(r) => {
                meta.representation = Some(RepKind::Iv);
                Self::push_networks(&mut meta, &mut arrays, &[("phi", &r.phi), ("psi", &r.psi)]);
            }
            Representation::Factored(r) => {
                meta.representation = Some(RepKind::Factored);
                meta.setting = Some(r.setting);
                Self::push_networks(
                    &mut meta,
                    &mut arrays,
                    &[("phi", &r.phi), ("psi", &r.psi), ("xi", &r.xi), ("nu", &r.nu)],
                );
                arrays.push(tensor_array("P_V", &r.p_v));
                arrays.push(tensor_array("P_Q", &r.p_q));
            }
        }
        Checkpoint { meta, arrays }
    }

    /// Representation plus fitted solution.
    pub fn from_model(rep: &Representation, sol: &Solution, extra: serde_json::Value) -> Result<Self> {
        let mut ck = Self::from_representation(rep, extra);
        let (kind, setting, regularizer, diag, lambda) = match (sol, rep) {
            (Solution::Iv(s), Representation::Iv(_)) => {
                ck.arrays.push(NamedArray::vector("u", &s.u));
                ck.arrays.push(NamedArray::vector("v", &s.v));
                (RepKind::Iv, None, s.regularizer, s.diagnostics, s.lambda)
            }
            (Solution::Factored(s), Representation::Factored(r)) if s.setting == r.setting => {
                ck.arrays.push(NamedArray::matrix("G", &s.g));
                ck.arrays.push(NamedArray::vector("w", &s.w));
                (
                    RepKind::Factored,
                    Some(s.setting),
                    s.regularizer,
                    s.diagnostics,
                    s.lambda,
                )
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "solution and representation come from different settings".into(),
                ))
            }
        };
        ck.arrays.push(NamedArray::vector(
            "solution.scalars",
            &[lambda, diag.gap, diag.objective],
        ));
        ck.meta.solution = Some(SolutionMeta {
            kind,
            setting,
            regularizer,
            method: diag.method,
            iterations: diag.iterations,
        });
        Ok(ck)
    }

    pub fn network(&self, name: &str) -> Result<FeatureNetwork> {
        let nm = self
            .meta
            .networks
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no network {name}")))?;
        nm.spec.validate()?;
        let mut layers = Vec::with_capacity(nm.spec.num_layers());
        for l in 0..nm.spec.num_layers() {
            let p = format!("{name}.{l}");
            let bn = if nm.spec.batch_norm[l] {
                Some(BatchNorm {
                    gamma: self.get(&format!("{p}.bn.gamma"))?.to_vector()?,
                    beta: self.get(&format!("{p}.bn.beta"))?.to_vector()?,
                    running_mean: self.get(&format!("{p}.bn.running_mean"))?.to_vector()?,
                    running_var: self.get(&format!("{p}.bn.running_var"))?.to_vector()?,
                })
            } else {
                None
            };
            layers.push(DenseLayer {
                weight: self.get(&format!("{p}.weight"))?.to_matrix()?,
                bias: self.get(&format!("{p}.bias"))?.to_vector()?,
                bn,
            });
        }
        FeatureNetwork::from_parts(nm.spec.clone(), NetworkParams { layers }, nm.input.clone())
    }

    fn tensor(&self, name: &str) -> Result<Tensor3> {
        let a = self.get(name)?;
        match a.dims[..] {
            [d0, d1, d2] => Tensor3::from_vec([d0, d1, d2], a.data.clone()),
            _ => Err(Error::Format(format!(
                "array {name} has rank {}, expected 3",
                a.dims.len()
            ))),
        }
    }

    pub fn representation(&self) -> Result<Representation> {
        match self.meta.representation {
            Some(RepKind::Iv) => Ok(Representation::Iv(IvRepresentation::from_networks(
                self.network("phi")?,
                self.network("psi")?,
            )?)),
            Some(RepKind::Factored) => {
                let setting = self
                    .meta
                    .setting
                    .ok_or_else(|| Error::Format("factored representation without a setting".into()))?;
                Ok(Representation::Factored(FactoredRepresentation::from_parts(
                    setting,
                    self.network("phi")?,
                    self.network("psi")?,
                    self.network("xi")?,
                    self.network("nu")?,
                    self.tensor("P_V")?,
                    self.tensor("P_Q")?,
                )?))
            }
            None => Err(Error::Format("checkpoint holds no representation".into())),
        }
    }

    pub fn solution(&self) -> Result<Solution> {
        let sm = self
            .meta
            .solution
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint holds no solution".into()))?;
        let scalars = self.get("solution.scalars")?.to_vector()?;
        let [lambda, gap, objective] = scalars[..] else {
            return Err(Error::Format("solution.scalars must hold 3 values".into()));
        };
        let diagnostics = Diagnostics {
            method: sm.method,
            iterations: sm.iterations,
            gap,
            objective,
        };
        Ok(match sm.kind {
            RepKind::Iv => Solution::Iv(IvSolution {
                u: self.get("u")?.to_vector()?,
                v: self.get("v")?.to_vector()?,
                lambda,
                regularizer: sm.regularizer,
                diagnostics,
            }),
            RepKind::Factored => Solution::Factored(FactoredSolution {
                setting: sm
                    .setting
                    .ok_or_else(|| Error::Format("factored solution without a setting".into()))?,
                g: self.get("G")?.to_matrix()?,
                w: self.get("w")?.to_vector()?,
                lambda,
                regularizer: sm.regularizer,
                diagnostics,
            }),
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(
            &u32::try_from(meta.len())
                .map_err(|_| Error::Format("metadata too large".into()))?
                .to_le_bytes(),
        )?;
        out.write_all(&meta)?;
        out.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            let name = a.name.as_bytes();
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Format(format!("array name too long: {}", a.name)))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(name)?;
            let rank = u8::try_from(a.dims.len()).map_err(|_| Error::Format("array rank above 255".into()))?;
            out.write_all(&[rank])?;
            for d in &a.dims {
                out.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &a.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint file".into()));
        }
        let version = read_u8(&mut input, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut input, "metadata length")? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut input, &mut meta, "metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = read_u32(&mut input, "array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut input, &mut len, "array name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut input, &mut name, "array name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = read_u8(&mut input, "rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 8];
                read_exact(&mut input, &mut d, "dims")?;
                dims.push(
                    usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::Format("dimension overflow".into()))?,
                );
            }
            let total = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let mut data = Vec::with_capacity(total.min(1 << 24));
            let mut buf = [0u8; 8];
            for _ in 0..total {
                read_exact(&mut input, &mut buf, &name)?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push(NamedArray { name, dims, data });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(input: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(input, &mut b, what)?;
    Ok(b[0])
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Activation;
    use crate::rng::SeededRng;
    use crate::saddle::{Diagnostics, Method};
    use crate::spectral_rep::FactoredSpecs;

    fn roundtrip(ck: &Checkpoint) -> Checkpoint {
        let mut buf = vec![];
        ck.write_to(&mut buf).unwrap();
        Checkpoint::read_from(&buf[..]).unwrap()
    }

    fn factored(seed: u64) -> FactoredRepresentation {
        let mut rng = SeededRng::new(seed);
        let mlp = |i, o| NetworkSpec::mlp(i, &[5], o, Activation::Relu, Activation::Tanh);
        let specs = FactoredSpecs {
            phi: mlp(1, 3),
            psi: mlp(2, 2),
            xi: mlp(2, 2),
            nu: NetworkSpec::linear(1, 4),
        };
        let mut rep = FactoredRepresentation::new(ConditionalSetting::Ivoc, specs, &mut rng).unwrap();
        rep.phi = rep
            .phi
            .clone()
            .with_input(InputTransform::Affine {
                shift: vec![0.1],
                scale: vec![3.0],
            })
            .unwrap();
        // Perturb running statistics so they are not just defaults.
        let x = Matrix::from_vec(6, 1, (0..6).map(|_| rng.normal()).collect()).unwrap();
        rep.phi.forward_train(&x).unwrap();
        rep
    }

    #[test]
    fn representation_and_solution_roundtrip_bit_exact() {
        let rep = Representation::Factored(factored(1));
        let mut rng = SeededRng::new(2);
        let sol = Solution::Factored(FactoredSolution {
            setting: ConditionalSetting::Ivoc,
            g: Matrix::from_vec(4, 9, (0..36).map(|_| rng.normal() / 3.0).collect()).unwrap(),
            w: (0..4).map(|_| rng.normal()).collect(),
            lambda: 1e-3,
            regularizer: RegularizerKind::FunctionL2,
            diagnostics: Diagnostics {
                method: Method::Gda,
                iterations: 17,
                gap: 1.0 / 3.0,
                objective: -0.1,
            },
        });
        let ck = Checkpoint::from_model(&rep, &sol, serde_json::json!({"note": 1})).unwrap();
        let back = roundtrip(&ck);
        assert_eq!(back, ck);
        assert_eq!(back.representation().unwrap(), rep);
        assert_eq!(back.solution().unwrap(), sol);
    }

    #[test]
    fn iv_roundtrip() {
        let mut rng = SeededRng::new(3);
        let spec = NetworkSpec::mlp(2, &[4, 4], 3, Activation::Tanh, Activation::Linear);
        let rep = Representation::Iv(IvRepresentation::new(spec.clone(), spec, &mut rng).unwrap());
        let back = roundtrip(&Checkpoint::from_representation(&rep, serde_json::Value::Null));
        assert_eq!(back.representation().unwrap(), rep);
        assert!(back.solution().is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let rep = Representation::Factored(factored(4));
        let mut buf = vec![];
        Checkpoint::from_representation(&rep, serde_json::Value::Null)
            .write_to(&mut buf)
            .unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(Checkpoint::read_from(&bad[..]).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
    }
}
