//! Finite models with exactly known conditional laws. Variables are stored
//! in datasets as integer codes `0..k`; outcomes as their real level values.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dataset::{Dataset, DatasetMeta, Setting};
use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, Matrix, DEFAULT_PINV_TOL};
use crate::rng::SeededRng;

const SUM_TOL: f64 = 1e-12;

fn check_dist(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "{what}: probabilities must be finite and nonnegative"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidArgument(format!(
            "{what}: probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

fn check_rows(rows: &[Vec<f64>], len: usize, width: usize, what: &str) -> Result<()> {
    if rows.len() != len {
        return Err(Error::dim(what, format!("{} rows, expected {len}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::dim(
                what,
                format!("row {i} has {} entries, expected {width}", r.len()),
            ));
        }
        check_dist(r, &format!("{what} row {i}"))?;
    }
    Ok(())
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_dist(k: usize, rng: &mut SeededRng) -> Vec<f64> {
    normalized((0..k).map(|_| 0.2 + rng.uniform()).collect())
}

fn codes(v: &[usize]) -> Matrix {
    Matrix::column(&v.iter().map(|&c| c as f64).collect::<Vec<_>>())
}

/// Joint probability table `p(x, z)` over two finite variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJointSpec {
    /// `table[x][z]`.
    pub table: Vec<Vec<f64>>,
}

impl DiscreteJointSpec {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let s = DiscreteJointSpec { table };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let nz = self.table.first().map_or(0, |r| r.len());
        if nz == 0 || self.table.iter().any(|r| r.len() != nz) {
            return Err(Error::InvalidArgument(
                "joint table must be a non-empty rectangle".into(),
            ));
        }
        let flat: Vec<f64> = self.table.iter().flatten().copied().collect();
        check_dist(&flat, "joint table")
    }

    /// `p(x, z) ∝ 1 + 3 exp(−(x − z)² / 2)` on a `k x k` grid.
    pub fn banded(k: usize) -> Self {
        let raw: Vec<Vec<f64>> = (0..k)
            .map(|x| {
                (0..k)
                    .map(|z| 1.0 + 3.0 * (-((x as f64 - z as f64).powi(2)) / 2.0).exp())
                    .collect()
            })
            .collect();
        let total: f64 = raw.iter().flatten().sum();
        DiscreteJointSpec {
            table: raw
                .into_iter()
                .map(|r| r.into_iter().map(|v| v / total).collect())
                .collect(),
        }
    }

    pub fn nx(&self) -> usize {
        self.table.len()
    }

    pub fn nz(&self) -> usize {
        self.table[0].len()
    }

    pub fn px(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn pz(&self) -> Vec<f64> {
        (0..self.nz()).map(|z| self.table.iter().map(|r| r[z]).sum()).collect()
    }
}

/// I.i.d. `(x, z)` codes from the table; the outcome column is zero.
pub fn gen_discrete_toy(spec: &DiscreteJointSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let nz = spec.nz();
    let flat: Vec<f64> = spec.table.iter().flatten().copied().collect();
    let mut rng = SeededRng::new(seed);
    let cells: Vec<usize> = (0..n).map(|_| rng.categorical(&flat)).collect();
    let xs: Vec<usize> = cells.iter().map(|c| c / nz).collect();
    let zs: Vec<usize> = cells.iter().map(|c| c % nz).collect();
    Dataset::new(
        Setting::Iv,
        codes(&xs),
        codes(&zs),
        Matrix::zeros(n, 1),
        None,
        None,
        None,
        DatasetMeta::new("discrete_toy", seed, json!({"n": n, "table": spec.table})),
    )
}

/// `p(x, z) / (p(x) p(z))`.
pub fn discrete_ratio_oracle(spec: &DiscreteJointSpec, x: usize, z: usize) -> Result<f64> {
    if x >= spec.nx() || z >= spec.nz() {
        return Err(Error::InvalidArgument(format!("cell ({x}, {z}) outside the table")));
    }
    let px = spec.px()[x];
    let pz = spec.pz()[z];
    if px == 0.0 || pz == 0.0 {
        return Err(Error::InvalidArgument(format!("zero marginal at cell ({x}, {z})")));
    }
    Ok(spec.table[x][z] / (px * pz))
}

/// Latent-class model `p(x|z) = Σ_r p(x|r) p(r|z)`, which factorizes as
/// `p(x) ⟨φ(x), ψ(z)⟩` with `φ(x)_r = p(x|r) / p(x)` and `ψ(z)_r = p(r|z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankIvModel {
    pub pz: Vec<f64>,
    /// `[r][x]`.
    pub px_given_r: Vec<Vec<f64>>,
    /// `[z][r]`.
    pub pr_given_z: Vec<Vec<f64>>,
}

impl LowRankIvModel {
    pub fn random(nx: usize, nz: usize, rank: usize, rng: &mut SeededRng) -> Self {
        LowRankIvModel {
            pz: random_dist(nz, rng),
            px_given_r: (0..rank).map(|_| random_dist(nx, rng)).collect(),
            pr_given_z: (0..nz).map(|_| random_dist(rank, rng)).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.px_given_r.len()
    }

    /// `[x][z]` joint probabilities.
    pub fn joint(&self) -> Vec<Vec<f64>> {
        let nx = self.px_given_r[0].len();
        (0..nx)
            .map(|x| {
                (0..self.pz.len())
                    .map(|z| {
                        self.pz[z]
                            * (0..self.rank())
                                .map(|r| self.px_given_r[r][x] * self.pr_given_z[z][r])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn px(&self) -> Vec<f64> {
        self.joint().iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows `φ(x)`.
    pub fn phi(&self) -> Matrix {
        let px = self.px();
        let mut m = Matrix::zeros(px.len(), self.rank());
        for (x, p) in px.iter().enumerate() {
            for r in 0..self.rank() {
                m.set(x, r, self.px_given_r[r][x] / p);
            }
        }
        m
    }

    /// Rows `ψ(z)`.
    pub fn psi(&self) -> Matrix {
        Matrix::from_rows(&self.pr_given_z).expect("rectangular")
    }
}

/// Conditional latent-class model `p(x|z,o) = Σ_r p(x|r) p(r|z,o)`, i.e.
/// `φ(x)_r = p(x|r) / p(x)`, `ψ(z) = e_z`, `V(o)[r][z] = p(r|z,o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankIvocModel {
    pub po: Vec<f64>,
    /// `[o][z]`.
    pub pz_given_o: Vec<Vec<f64>>,
    /// `[r][x]`.
    pub px_given_r: Vec<Vec<f64>>,
    /// `[o][z][r]`.
    pub pr_given_zo: Vec<Vec<Vec<f64>>>,
}

impl LowRankIvocModel {
    pub fn random(nx: usize, nz: usize, no: usize, rank: usize, rng: &mut SeededRng) -> Self {
        LowRankIvocModel {
            po: random_dist(no, rng),
            pz_given_o: (0..no).map(|_| random_dist(nz, rng)).collect(),
            px_given_r: (0..rank).map(|_| random_dist(nx, rng)).collect(),
            pr_given_zo: (0..no)
                .map(|_| (0..nz).map(|_| random_dist(rank, rng)).collect())
                .collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.px_given_r[0].len(),
            self.pz_given_o[0].len(),
            self.po.len(),
            self.px_given_r.len(),
        )
    }

    /// `[x][z][o]` joint probabilities.
    pub fn joint(&self) -> Vec<Vec<Vec<f64>>> {
        let (nx, nz, no, d) = self.dims();
        (0..nx)
            .map(|x| {
                (0..nz)
                    .map(|z| {
                        (0..no)
                            .map(|o| {
                                self.po[o]
                                    * self.pz_given_o[o][z]
                                    * (0..d)
                                        .map(|r| self.px_given_r[r][x] * self.pr_given_zo[o][z][r])
                                        .sum::<f64>()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn px(&self) -> Vec<f64> {
        self.joint().iter().map(|zx| zx.iter().flatten().sum()).collect()
    }

    pub fn phi(&self) -> Matrix {
        let px = self.px();
        let d = self.px_given_r.len();
        let mut m = Matrix::zeros(px.len(), d);
        for (x, p) in px.iter().enumerate() {
            for r in 0..d {
                m.set(x, r, self.px_given_r[r][x] / p);
            }
        }
        m
    }

    /// `V(o)`, `rank x nz`.
    pub fn v(&self, o: usize) -> Matrix {
        let (_, nz, _, d) = self.dims();
        let mut m = Matrix::zeros(d, nz);
        for z in 0..nz {
            for r in 0..d {
                m.set(r, z, self.pr_given_zo[o][z][r]);
            }
        }
        m
    }
}

/// Finite IV-OC model with a hidden confounder `e`:
/// `o → z`, `o → e`, `(z, o, e) → x`, and
/// `y = f(x, o) + g(e, o) ± noise` with `E[g(e, o) | o] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvocDiscreteSpec {
    pub po: Vec<f64>,
    /// `[o][z]`.
    pub pz_given_o: Vec<Vec<f64>>,
    /// `[o][e]`.
    pub pe_given_o: Vec<Vec<f64>>,
    /// `[z][o][e][x]`.
    pub px_given_zoe: Vec<Vec<Vec<Vec<f64>>>>,
    /// Structural function `[x][o]`.
    pub f: Vec<Vec<f64>>,
    /// Confounding shift `[e][o]`, centered per `o` by the constructor.
    pub g: Vec<Vec<f64>>,
    /// Half-width of the symmetric two-point outcome noise.
    pub noise: f64,
}

/// One cell of an enumerated joint law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvocCell {
    pub z: usize,
    pub o: usize,
    pub x: usize,
    pub y: usize,
    pub prob: f64,
}

impl IvocDiscreteSpec {
    pub fn random(nx: usize, nz: usize, no: usize, ne: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut s = IvocDiscreteSpec {
            po: random_dist(no, rng),
            pz_given_o: (0..no).map(|_| random_dist(nz, rng)).collect(),
            pe_given_o: (0..no).map(|_| random_dist(ne, rng)).collect(),
            px_given_zoe: (0..nz)
                .map(|_| {
                    (0..no)
                        .map(|_| (0..ne).map(|_| random_dist(nx, rng)).collect())
                        .collect()
                })
                .collect(),
            f: (0..nx)
                .map(|_| (0..no).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
                .collect(),
            g: (0..ne)
                .map(|_| (0..no).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
                .collect(),
            noise: 0.5,
        };
        s.center_g();
        s.validate()?;
        Ok(s)
    }

    fn center_g(&mut self) {
        for o in 0..self.po.len() {
            let mean: f64 = (0..self.g.len()).map(|e| self.pe_given_o[o][e] * self.g[e][o]).sum();
            for e in 0..self.g.len() {
                self.g[e][o] -= mean;
            }
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.f.len(), self.pz_given_o[0].len(), self.po.len(), self.g.len())
    }

    pub fn validate(&self) -> Result<()> {
        check_dist(&self.po, "po")?;
        let (nx, nz, no, ne) = self.dims();
        check_rows(&self.pz_given_o, no, nz, "pz_given_o")?;
        check_rows(&self.pe_given_o, no, ne, "pe_given_o")?;
        if self.px_given_zoe.len() != nz {
            return Err(Error::dim("px_given_zoe", "outer length must equal |Z|"));
        }
        for by_o in &self.px_given_zoe {
            if by_o.len() != no {
                return Err(Error::dim("px_given_zoe", "second length must equal |O|"));
            }
            for by_e in by_o {
                check_rows(by_e, ne, nx, "px_given_zoe")?;
            }
        }
        Ok(())
    }

    /// Distinct outcome values in increasing order.
    pub fn y_levels(&self) -> Vec<f64> {
        let (nx, _, no, ne) = self.dims();
        let mut v = Vec::new();
        for x in 0..nx {
            for o in 0..no {
                for e in 0..ne {
                    let m = self.f[x][o] + self.g[e][o];
                    v.push(m - self.noise);
                    v.push(m + self.noise);
                }
            }
        }
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        v
    }

    fn level_index(levels: &[f64], y: f64) -> usize {
        levels
            .iter()
            .position(|l| (l - y).abs() < 1e-12)
            .expect("level in support")
    }

    /// Every `(z, o, x, y)` cell with positive probability; `y` indexes
    /// [`Self::y_levels`].
    pub fn cells(&self) -> Vec<IvocCell> {
        let (nx, nz, no, ne) = self.dims();
        let levels = self.y_levels();
        let mut acc = std::collections::BTreeMap::new();
        for z in 0..nz {
            for o in 0..no {
                for e in 0..ne {
                    let pzoe = self.po[o] * self.pz_given_o[o][z] * self.pe_given_o[o][e];
                    for x in 0..nx {
                        let p = pzoe * self.px_given_zoe[z][o][e][x];
                        let m = self.f[x][o] + self.g[e][o];
                        for y in [m - self.noise, m + self.noise] {
                            *acc.entry((z, o, x, Self::level_index(&levels, y))).or_insert(0.0) += 0.5 * p;
                        }
                    }
                }
            }
        }
        acc.into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|((z, o, x, y), prob)| IvocCell { z, o, x, y, prob })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = SeededRng::new(seed);
        let (mut xs, mut zs, mut os, mut ys, mut truth) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let o = rng.categorical(&self.po);
            let z = rng.categorical(&self.pz_given_o[o]);
            let e = rng.categorical(&self.pe_given_o[o]);
            let x = rng.categorical(&self.px_given_zoe[z][o][e]);
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            xs.push(x);
            zs.push(z);
            os.push(o);
            ys.push(self.f[x][o] + self.g[e][o] + sign * self.noise);
            truth.push(self.f[x][o]);
        }
        Dataset::new(
            Setting::Ivoc,
            codes(&xs),
            codes(&zs),
            Matrix::column(&ys),
            Some(codes(&os)),
            None,
            Some(truth),
            DatasetMeta::new("ivoc_discrete", seed, serde_json::to_value(self)?),
        )
    }
}

/// Finite proxy model with hidden confounder `e`: `e → z`, `(z, e) → x`,
/// `e → w`, `(x, e) → y`, so `z ⟂ y | (x, e)` and `w ⟂ (z, x) | e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PclDiscreteSpec {
    pub pe: Vec<f64>,
    /// `[e][z]`.
    pub pz_given_e: Vec<Vec<f64>>,
    /// `[z][e][x]`.
    pub px_given_ze: Vec<Vec<Vec<f64>>>,
    /// `[e][w]`.
    pub pw_given_e: Vec<Vec<f64>>,
    pub y_levels: Vec<f64>,
    /// `[x][e][y]`.
    pub py_given_xe: Vec<Vec<Vec<f64>>>,
}

/// Exact conditional tables of a [`PclDiscreteSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PclTables {
    /// `p(x, z)`, `[x][z]`.
    pub pxz: Vec<Vec<f64>>,
    /// `p(w | x, z)` as one `|Z| x |W|` matrix per `x`.
    pub pw_given_xz: Vec<Matrix>,
    /// `E[Y | x, z]`, `[x][z]`.
    pub ey_given_xz: Vec<Vec<f64>>,
    pub pw: Vec<f64>,
}

impl PclDiscreteSpec {
    pub fn validate(&self) -> Result<()> {
        check_dist(&self.pe, "pe")?;
        let ne = self.pe.len();
        let nz = self.pz_given_e.first().map_or(0, |r| r.len());
        let nx = self.px_given_ze.first().and_then(|r| r.first()).map_or(0, |r| r.len());
        let nw = self.pw_given_e.first().map_or(0, |r| r.len());
        check_rows(&self.pz_given_e, ne, nz, "pz_given_e")?;
        check_rows(&self.pw_given_e, ne, nw, "pw_given_e")?;
        if self.px_given_ze.len() != nz {
            return Err(Error::dim("px_given_ze", "outer length must equal |Z|"));
        }
        for r in &self.px_given_ze {
            check_rows(r, ne, nx, "px_given_ze")?;
        }
        if self.py_given_xe.len() != nx {
            return Err(Error::dim("py_given_xe", "outer length must equal |X|"));
        }
        for r in &self.py_given_xe {
            check_rows(r, ne, self.y_levels.len(), "py_given_xe")?;
        }
        Ok(())
    }

    /// `(|X|, |Z|, |W|, |E|)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.py_given_xe.len(),
            self.pz_given_e[0].len(),
            self.pw_given_e[0].len(),
            self.pe.len(),
        )
    }

    /// Binary confounder, treatment and proxies with a four-level outcome;
    /// the bridge is identified.
    pub fn fixture() -> Self {
        PclDiscreteSpec {
            pe: vec![0.5, 0.5],
            pz_given_e: vec![vec![0.85, 0.15], vec![0.15, 0.85]],
            px_given_ze: vec![
                vec![vec![0.8, 0.2], vec![0.4, 0.6]],
                vec![vec![0.55, 0.45], vec![0.15, 0.85]],
            ],
            pw_given_e: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            y_levels: vec![0.0, 1.0, 2.5, 4.0],
            py_given_xe: vec![
                vec![vec![0.5, 0.3, 0.15, 0.05], vec![0.2, 0.3, 0.3, 0.2]],
                vec![vec![0.15, 0.25, 0.35, 0.25], vec![0.05, 0.15, 0.3, 0.5]],
            ],
        }
    }

    pub fn mean_y_given_xe(&self, x: usize, e: usize) -> f64 {
        self.py_given_xe[x][e]
            .iter()
            .zip(&self.y_levels)
            .map(|(p, y)| p * y)
            .sum()
    }

    /// Posterior `p(e | x, z)` and the joint `p(x, z)`.
    fn posterior(&self, x: usize, z: usize) -> (Vec<f64>, f64) {
        let ne = self.pe.len();
        let joint: Vec<f64> = (0..ne)
            .map(|e| self.pe[e] * self.pz_given_e[e][z] * self.px_given_ze[z][e][x])
            .collect();
        let total: f64 = joint.iter().sum();
        (joint.iter().map(|v| v / total).collect(), total)
    }

    pub fn tables(&self) -> Result<PclTables> {
        self.validate()?;
        let (nx, nz, nw, ne) = self.dims();
        let mut pxz = vec![vec![0.0; nz]; nx];
        let mut ey = vec![vec![0.0; nz]; nx];
        let mut pw_given_xz = Vec::with_capacity(nx);
        for x in 0..nx {
            let mut m = Matrix::zeros(nz, nw);
            for z in 0..nz {
                let (post, total) = self.posterior(x, z);
                if total == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "cell (x={x}, z={z}) has zero probability"
                    )));
                }
                pxz[x][z] = total;
                ey[x][z] = (0..ne).map(|e| post[e] * self.mean_y_given_xe(x, e)).sum();
                for w in 0..nw {
                    m.set(z, w, (0..ne).map(|e| post[e] * self.pw_given_e[e][w]).sum());
                }
            }
            pw_given_xz.push(m);
        }
        let pw = (0..nw)
            .map(|w| (0..ne).map(|e| self.pe[e] * self.pw_given_e[e][w]).sum())
            .collect();
        Ok(PclTables {
            pxz,
            pw_given_xz,
            ey_given_xz: ey,
            pw,
        })
    }

    /// Interventional mean `Σ_e p(e) E[Y | x, e]`.
    pub fn do_effect(&self, x: usize) -> f64 {
        (0..self.pe.len())
            .map(|e| self.pe[e] * self.mean_y_given_xe(x, e))
            .sum()
    }
}

/// Bridge `h(x, w)` solving `Σ_w h(x, w) p(w|x,z) = E[Y|x,z]` for all `z`,
/// per treatment level, as a `|X| x |W|` table.
pub fn solve_bridge_exact(spec: &PclDiscreteSpec) -> Result<Matrix> {
    let t = spec.tables()?;
    let (nx, nz, nw, _) = spec.dims();
    let mut h = Matrix::zeros(nx, nw);
    for x in 0..nx {
        let m = &t.pw_given_xz[x];
        let rank = crate::linalg::rank(m, 1e-9)?;
        if rank < nw {
            return Err(Error::InvalidArgument(format!(
                "p(w|x={x},z) has rank {rank} < |W| = {nw}; the bridge is not identified, use a spec with more informative proxies"
            )));
        }
        let sol = pseudo_inverse(m, DEFAULT_PINV_TOL)?.matvec(&t.ey_given_xz[x])?;
        let resid = m.matvec(&sol)?;
        let worst = (0..nz)
            .map(|z| (resid[z] - t.ey_given_xz[x][z]).abs())
            .fold(0.0, f64::max);
        if worst > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "no exact bridge at x={x} (residual {worst:.2e}); E[Y|x,z] is outside the range of p(w|x,z)"
            )));
        }
        h.row_mut(x).copy_from_slice(&sol);
    }
    Ok(h)
}

/// `Σ_w p(w) h(x, w)` for every treatment level.
pub fn bridge_effects(spec: &PclDiscreteSpec, bridge: &Matrix) -> Result<Vec<f64>> {
    let pw = spec.tables()?.pw;
    Ok((0..bridge.rows())
        .map(|x| bridge.row(x).iter().zip(&pw).map(|(h, p)| h * p).sum())
        .collect())
}

/// Samples `(x, z, w, y)`; the truth column holds the bridge value `h(x, w)`.
pub fn gen_pcl_discrete(spec: &PclDiscreteSpec, n: usize, seed: u64) -> Result<Dataset> {
    let bridge = solve_bridge_exact(spec)?;
    let mut rng = SeededRng::new(seed);
    let (mut xs, mut zs, mut ws, mut ys, mut truth) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let e = rng.categorical(&spec.pe);
        let z = rng.categorical(&spec.pz_given_e[e]);
        let x = rng.categorical(&spec.px_given_ze[z][e]);
        let w = rng.categorical(&spec.pw_given_e[e]);
        let y = spec.y_levels[rng.categorical(&spec.py_given_xe[x][e])];
        xs.push(x);
        zs.push(z);
        ws.push(w);
        ys.push(y);
        truth.push(bridge.get(x, w));
    }
    Dataset::new(
        Setting::Pcl,
        codes(&xs),
        codes(&zs),
        Matrix::column(&ys),
        None,
        Some(codes(&ws)),
        Some(truth),
        DatasetMeta::new("pcl_discrete", seed, serde_json::to_value(spec)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let ind = DiscreteJointSpec::new(vec![vec![0.06, 0.14], vec![0.24, 0.56]]).unwrap();
        for x in 0..2 {
            for z in 0..2 {
                assert!((discrete_ratio_oracle(&ind, x, z).unwrap() - 1.0).abs() < 1e-12);
            }
        }
        let s = DiscreteJointSpec::new(vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        assert!((discrete_ratio_oracle(&s, 0, 0).unwrap() - 1.6).abs() < 1e-15);
        let zero = DiscreteJointSpec::new(vec![vec![0.5, 0.0], vec![0.5, 0.0]]).unwrap();
        assert!(discrete_ratio_oracle(&zero, 0, 1).is_err());
    }

    #[test]
    fn bad_table_rejected() {
        assert!(DiscreteJointSpec::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(DiscreteJointSpec::new(vec![vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn toy_empirical_joint() {
        let spec = DiscreteJointSpec::new(vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let d = gen_discrete_toy(&spec, 100_000, 7).unwrap();
        let mut counts = [[0.0; 2]; 2];
        for i in 0..d.n() {
            counts[d.x.get(i, 0) as usize][d.z.get(i, 0) as usize] += 1.0 / d.n() as f64;
        }
        for x in 0..2 {
            for z in 0..2 {
                assert!((counts[x][z] - spec.table[x][z]).abs() < 0.01);
            }
        }
    }

    #[test]
    fn banded_is_valid() {
        DiscreteJointSpec::banded(8).validate().unwrap();
    }

    #[test]
    fn bridge_two_level_hand_solve() {
        let spec = PclDiscreteSpec::fixture();
        let h = solve_bridge_exact(&spec).unwrap();
        let t = spec.tables().unwrap();
        for x in 0..2 {
            // Cramer's rule on the 2x2 system.
            let m = &t.pw_given_xz[x];
            let (a, b, c, d) = (m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1));
            let (r0, r1) = (t.ey_given_xz[x][0], t.ey_given_xz[x][1]);
            let det = a * d - b * c;
            assert!((h.get(x, 0) - (r0 * d - b * r1) / det).abs() < 1e-12);
            assert!((h.get(x, 1) - (a * r1 - c * r0) / det).abs() < 1e-12);
        }
        // With |W| = |Z| = |E| the bridge effect is the interventional mean.
        let eff = bridge_effects(&spec, &h).unwrap();
        for (x, e) in eff.iter().enumerate() {
            assert!((e - spec.do_effect(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn bridge_constant_when_outcome_ignores_confounder() {
        let mut spec = PclDiscreteSpec::fixture();
        spec.py_given_xe[0][1] = spec.py_given_xe[0][0].clone();
        spec.py_given_xe[1][1] = spec.py_given_xe[1][0].clone();
        let h = solve_bridge_exact(&spec).unwrap();
        for x in 0..2 {
            let ey = spec.mean_y_given_xe(x, 0);
            assert!((h.get(x, 0) - ey).abs() < 1e-12);
            assert!((h.get(x, 1) - ey).abs() < 1e-12);
        }
    }

    #[test]
    fn uninformative_proxy_rejected() {
        let mut spec = PclDiscreteSpec::fixture();
        spec.pw_given_e = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let err = solve_bridge_exact(&spec).unwrap_err().to_string();
        assert!(err.contains("rank"), "{err}");
    }

    #[test]
    fn ivoc_cells_sum_to_one() {
        let mut rng = SeededRng::new(3);
        let spec = IvocDiscreteSpec::random(2, 2, 2, 2, &mut rng).unwrap();
        let total: f64 = spec.cells().iter().map(|c| c.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let d = spec.sample(50, 1).unwrap();
        assert_eq!(d.n(), 50);
    }

    #[test]
    fn low_rank_joint_normalized() {
        let mut rng = SeededRng::new(1);
        let m = LowRankIvModel::random(5, 4, 3, &mut rng);
        let total: f64 = m.joint().iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let m = LowRankIvocModel::random(5, 4, 3, 2, &mut rng);
        let total: f64 = m.joint().iter().flatten().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
