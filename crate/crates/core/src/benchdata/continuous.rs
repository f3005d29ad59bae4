//! Continuous generators: Demand Design, the high-dimensional digit
//! embedding and a linear-Gaussian IV instance.

use serde_json::json;

use super::dataset::{Dataset, DatasetMeta, Setting};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{sub_seed, SeededRng};

pub const EMBED_DIM: usize = 784;
pub const EMBED_NOISE: f64 = 0.1;

/// Seasonal demand shape `2((t−5)⁴/600 + exp(−4(t−5)²) + t/10 − 2)`.
pub fn demand_h(t: f64) -> f64 {
    2.0 * ((t - 5.0).powi(4) / 600.0 + (-4.0 * (t - 5.0).powi(2)).exp() + t / 10.0 - 2.0)
}

/// Structural demand `100 + (10 + p) s h(t) − 2p`.
pub fn demand_f(p: f64, t: f64, s: f64) -> f64 {
    100.0 + (10.0 + p) * s * demand_h(t) - 2.0 * p
}

/// Price `25 + (c + 3) h(t) + v`.
pub fn demand_price(c: f64, t: f64, v: f64) -> f64 {
    25.0 + (c + 3.0) * demand_h(t) + v
}

// Approximate population mean and standard deviation of the price, used to
// bring it into the range the digit map resolves.
const PRICE_CENTER: f64 = 17.8;
const PRICE_SPREAD: f64 = 3.7;

/// Digit index `round(min(max(1.5x + 5, 0), 9))`, halves rounded away from zero.
pub fn digit_index(x: f64) -> usize {
    (1.5 * x + 5.0).clamp(0.0, 9.0).round() as usize
}

/// Stand-in for a random digit image: a fixed Gaussian prototype per digit
/// plus independent per-sample noise.
#[derive(Debug, Clone)]
pub struct DigitEmbedder {
    seed: u64,
    prototypes: Vec<Vec<f64>>,
}

impl DigitEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = SeededRng::new(sub_seed(seed, 0x5EED_D161));
        let prototypes = (0..10)
            .map(|_| (0..EMBED_DIM).map(|_| rng.normal()).collect())
            .collect();
        DigitEmbedder { seed, prototypes }
    }

    pub fn prototype(&self, digit: usize) -> &[f64] {
        &self.prototypes[digit]
    }

    /// Embedding of `x_low` for the sample with the given index; the noise
    /// depends only on `(seed, index)`.
    pub fn embed(&self, x_low: f64, index: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(sub_seed(self.seed ^ 0x0A11_CE5E, index));
        self.prototypes[digit_index(x_low)]
            .iter()
            .map(|p| p + EMBED_NOISE * rng.normal())
            .collect()
    }
}

/// Ticket-demand IV-OC data: treatment price `P`, instrument fuel cost `C`,
/// observables `(T, S)`, and noise correlated with the price shock.
pub fn gen_demand_design(n: usize, rho: f64, seed: u64, high_dim: bool) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1), got {rho}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let s = rng.int_inclusive(1, 7) as f64;
        let t = rng.uniform_range(0.0, 10.0);
        let c = rng.normal();
        let v = rng.normal();
        let e = rho * v + (1.0 - rho * rho).sqrt() * rng.normal();
        let p = demand_price(c, t, v);
        let f = demand_f(p, t, s);
        rows.push((p, t, s, c, f + e, f));
    }
    let z = Matrix::column(&rows.iter().map(|r| r.3).collect::<Vec<_>>());
    let y = Matrix::column(&rows.iter().map(|r| r.4).collect::<Vec<_>>());
    let truth = rows.iter().map(|r| r.5).collect();
    let (x, o) = if high_dim {
        let emb = DigitEmbedder::new(seed);
        let mut x = Matrix::zeros(n, EMBED_DIM);
        let mut o = Matrix::zeros(n, EMBED_DIM + 1);
        for (i, r) in rows.iter().enumerate() {
            let idx = 2 * i as u64;
            x.row_mut(i)
                .copy_from_slice(&emb.embed((r.0 - PRICE_CENTER) / PRICE_SPREAD, idx));
            let orow = o.row_mut(i);
            orow[0] = r.1;
            orow[1..].copy_from_slice(&emb.embed((r.2 - 4.0) / 1.5, idx + 1));
        }
        (x, o)
    } else {
        let x = Matrix::column(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        let o = Matrix::from_rows(&rows.iter().map(|r| vec![r.1, r.2]).collect::<Vec<_>>())?;
        (x, o)
    };
    Dataset::new(
        Setting::Ivoc,
        x,
        z,
        y,
        Some(o),
        None,
        Some(truth),
        DatasetMeta::new("demand", seed, json!({"n": n, "rho": rho, "high_dim": high_dim})),
    )
}

/// `X = Z + cε + v`, `Y = aX + ε` with independent standard normals.
pub fn gen_linear_gaussian_iv(n: usize, a: f64, c: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let (mut xs, mut zs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z = rng.normal();
        let e = rng.normal();
        let v = rng.normal();
        let x = z + c * e + v;
        xs.push(x);
        zs.push(z);
        ys.push(a * x + e);
    }
    let truth = xs.iter().map(|x| a * x).collect();
    Dataset::new(
        Setting::Iv,
        Matrix::column(&xs),
        Matrix::column(&zs),
        Matrix::column(&ys),
        None,
        None,
        Some(truth),
        DatasetMeta::new(
            "linear_gaussian",
            seed,
            json!({"n": n, "slope": a, "confounding": c, "ols_slope": linear_gaussian_ols_slope(a, c)}),
        ),
    )
}

/// Population least-squares slope `a + c / (2 + c²)` of the confounded regression.
pub fn linear_gaussian_ols_slope(a: f64, c: f64) -> f64 {
    a + c / (2.0 + c * c)
}
