//! Config-driven end-to-end runs: generate data, train a representation,
//! solve the saddle problem over a λ sweep and score against ground truth.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchdata::{
    bridge_effects, gen_demand_design, gen_linear_gaussian_iv, gen_pcl_discrete, oos_mse, solve_bridge_exact, Dataset,
    PclDiscreteSpec, Setting,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neuralnet::{Activation, FeatureNetwork, InputTransform, NetworkSpec};
use crate::rng::{sub_seed, SeededRng};
use crate::saddle::{
    baseline_fit, pcl_causal_effect, predict_structural, solve_iv_saddle, solve_ivoc_saddle, solve_pcl_saddle,
    BaselineKind, RegularizerKind, RegularizerSpec, Solution, SolverConfig,
};
use crate::spectral_rep::{
    train_representation, ConditionalSetting, FactoredRepresentation, FactoredSpecs, IvRepresentation, LossKind,
    Representation, Stage, Tensor3, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    LinearGaussianIv {
        #[serde(default = "default_slope")]
        slope: f64,
        #[serde(default = "default_confound")]
        confound: f64,
    },
    DemandDesign {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default)]
        high_dim: bool,
    },
    /// Finite proxy model; the built-in fixture when `spec` is absent.
    PclDiscrete {
        #[serde(default)]
        spec: Option<PclDiscreteSpec>,
    },
    /// Pre-generated dataset files.
    File { train: PathBuf, test: PathBuf },
}

fn default_slope() -> f64 {
    2.0
}
fn default_confound() -> f64 {
    1.0
}
fn default_rho() -> f64 {
    0.5
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::LinearGaussianIv {
            slope: 2.0,
            confound: 1.0,
        }
    }
}

impl GeneratorConfig {
    fn setting(&self) -> Option<Setting> {
        match self {
            GeneratorConfig::LinearGaussianIv { .. } => Some(Setting::Iv),
            GeneratorConfig::DemandDesign { .. } => Some(Setting::Ivoc),
            GeneratorConfig::PclDiscrete { .. } => Some(Setting::Pcl),
            GeneratorConfig::File { .. } => None,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            GeneratorConfig::LinearGaussianIv { slope, confound } => gen_linear_gaussian_iv(n, *slope, *confound, seed),
            GeneratorConfig::DemandDesign { rho, high_dim } => gen_demand_design(n, *rho, seed, *high_dim),
            GeneratorConfig::PclDiscrete { spec } => gen_pcl_discrete(&self.pcl_spec(spec), n, seed),
            GeneratorConfig::File { train, .. } => Dataset::load(train),
        }
    }

    pub fn generate_test(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            GeneratorConfig::File { test, .. } => Dataset::load(test),
            _ => self.generate(n, seed),
        }
    }

    fn pcl_spec(&self, spec: &Option<PclDiscreteSpec>) -> PclDiscreteSpec {
        spec.clone().unwrap_or_else(PclDiscreteSpec::fixture)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Per-column standardization fitted on the training rows.
    #[default]
    Standardize,
    /// Indicator of the observed level of a single discrete column.
    OneHot,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
    pub batch_norm: bool,
    pub encoding: Encoding,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![32],
            activation: Activation::Tanh,
            output_activation: Activation::Linear,
            batch_norm: true,
            encoding: Encoding::Standardize,
        }
    }
}

impl NetConfig {
    /// Network for raw column `col` with `out` features.
    fn build(&self, col: &Matrix, out: usize, rng: &mut SeededRng) -> Result<FeatureNetwork> {
        let (input, width) = match self.encoding {
            Encoding::Standardize => (Some(InputTransform::fit_affine(col)), col.cols()),
            Encoding::Raw => (None, col.cols()),
            Encoding::OneHot => {
                if col.cols() != 1 {
                    return Err(Error::config("encoding", "one_hot needs a single column"));
                }
                let mut levels = col.col(0);
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                let k = levels.len();
                (Some(InputTransform::OneHot { levels }), k)
            }
        };
        let mut spec = NetworkSpec::mlp(width, &self.hidden, out, self.activation, self.output_activation);
        if !self.batch_norm {
            spec = spec.without_batch_norm();
        }
        let net = FeatureNetwork::new(spec, rng)?;
        match input {
            Some(t) => net.with_input(t),
            None => Ok(net),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepConfig {
    /// Use `φ(x) = x`, `ψ(z) = z` instead of learned IV features.
    pub exact_features: bool,
    /// IV feature dimension.
    pub d: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub d_o: usize,
    pub d_y: usize,
    pub phi: NetConfig,
    pub psi: NetConfig,
    pub xi: NetConfig,
    pub nu: NetConfig,
}

impl Default for RepConfig {
    fn default() -> Self {
        RepConfig {
            exact_features: false,
            d: 4,
            d_x: 8,
            d_z: 8,
            d_o: 8,
            d_y: 8,
            phi: NetConfig::default(),
            psi: NetConfig::default(),
            xi: NetConfig::default(),
            nu: NetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub setting: Setting,
    pub generator: GeneratorConfig,
    pub representation: RepConfig,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: crate::neuralnet::AdamConfig,
    /// Skip the treatment-side factorization and train the outcome stage
    /// jointly (the simplified IV-OC variant).
    pub skip_treatment_stage: bool,
    /// Train the outcome stage jointly with the shared maps.
    pub joint_outcome: bool,
    pub regularizer: RegularizerKind,
    pub lambdas: Vec<f64>,
    pub solver: SolverConfig,
    /// Learn the representation and solve the saddle problem on disjoint
    /// halves of the training rows.
    pub split_rep_estimation: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Extra rows without outcomes for the outcome-free factorizations.
    pub unlabeled_n: usize,
    pub seed: u64,
    pub replicates: usize,
    /// Derive each replicate's seed from (seed, replicate); when false every
    /// replicate reuses `seed`.
    pub replicate_sub_seeds: bool,
    pub baselines: Vec<BaselineKind>,
    pub baseline_lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            setting: Setting::Iv,
            generator: GeneratorConfig::default(),
            representation: RepConfig::default(),
            loss: LossKind::L2,
            epochs: 50,
            batch_size: 256,
            optimizer: Default::default(),
            skip_treatment_stage: false,
            joint_outcome: false,
            regularizer: RegularizerKind::ParamL2,
            lambdas: vec![1e-4, 1e-3, 1e-2],
            solver: SolverConfig::default(),
            split_rep_estimation: true,
            n_train: 2_000,
            n_test: 1_000,
            unlabeled_n: 0,
            seed: 0,
            replicates: 1,
            replicate_sub_seeds: true,
            baselines: vec![BaselineKind::DirectRidge, BaselineKind::TwoStageLs],
            baseline_lambda: 0.0,
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document; unknown fields are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.generator.setting() {
            if s != self.setting {
                return Err(Error::config(
                    "setting",
                    format!("{:?} does not match the generator's {s:?}", self.setting),
                ));
            }
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        let min_train = if self.split_rep_estimation { 4 } else { 2 };
        if self.n_train < min_train {
            return Err(Error::config("n_train", format!("must be at least {min_train}")));
        }
        if self.lambdas.is_empty() {
            return Err(Error::config("lambdas", "needs at least one value"));
        }
        for l in &self.lambdas {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(Error::config(
                    "lambdas",
                    format!("{l} is not a finite nonnegative value"),
                ));
            }
        }
        if !(self.baseline_lambda.is_finite() && self.baseline_lambda >= 0.0) {
            return Err(Error::config("baseline_lambda", "must be finite and >= 0"));
        }
        let r = &self.representation;
        for (field, v) in [
            ("representation.d", r.d),
            ("representation.d_x", r.d_x),
            ("representation.d_z", r.d_z),
            ("representation.d_o", r.d_o),
            ("representation.d_y", r.d_y),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, net) in [
            ("representation.phi.hidden", &r.phi),
            ("representation.psi.hidden", &r.psi),
            ("representation.xi.hidden", &r.xi),
            ("representation.nu.hidden", &r.nu),
        ] {
            if net.hidden.contains(&0) {
                return Err(Error::config(field, "layer widths must be positive"));
            }
        }
        if r.exact_features && self.setting != Setting::Iv {
            return Err(Error::config("representation.exact_features", "only available for IV"));
        }
        if let GeneratorConfig::DemandDesign { rho, .. } = self.generator {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::config("generator.rho", format!("must lie in [0, 1), got {rho}")));
            }
        }
        self.train_config(0).validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(field, reason),
            other => other,
        })?;
        self.solver_validate()
    }

    fn solver_validate(&self) -> Result<()> {
        if self.solver.gda.max_iters == 0 {
            return Err(Error::config("solver.gda.max_iters", "must be positive"));
        }
        if !(self.solver.gda.tol > 0.0) {
            return Err(Error::config("solver.gda.tol", "must be positive"));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        if self.replicate_sub_seeds {
            sub_seed(self.seed, replicate as u64)
        } else {
            self.seed
        }
    }
}

/// Independent streams derived from a replicate seed.
pub mod stream {
    pub const DATA: u64 = 0;
    pub const TEST: u64 = 1;
    pub const UNLABELED: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
}

fn column(data: &Dataset, name: char) -> &Matrix {
    match name {
        'x' => &data.x,
        'z' => &data.z,
        'o' => data.o.as_ref().expect("validated IV-OC dataset"),
        'w' => data.w.as_ref().expect("validated PCL dataset"),
        _ => &data.y,
    }
}

/// Builds an untrained representation sized for `data`.
pub fn build_representation(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Representation> {
    let r = &cfg.representation;
    let mut rng = SeededRng::new(seed);
    match data.setting {
        Setting::Iv => {
            if r.exact_features {
                if data.x.cols() != data.z.cols() {
                    return Err(Error::config(
                        "representation.exact_features",
                        "needs treatment and instrument of equal width",
                    ));
                }
                let d = data.x.cols();
                return Ok(Representation::Iv(IvRepresentation::from_networks(
                    FeatureNetwork::identity(d),
                    FeatureNetwork::identity(d),
                )?));
            }
            let phi = r.phi.build(&data.x, r.d, &mut rng)?;
            let psi = r.psi.build(&data.z, r.d, &mut rng)?;
            Ok(Representation::Iv(IvRepresentation::from_networks(phi, psi)?))
        }
        Setting::Ivoc | Setting::Pcl => {
            let (setting, a, c) = if data.setting == Setting::Ivoc {
                (ConditionalSetting::Ivoc, 'x', 'o')
            } else {
                (ConditionalSetting::Pcl, 'w', 'x')
            };
            let phi = r.phi.build(column(data, a), r.d_x, &mut rng)?;
            let psi = r.psi.build(&data.z, r.d_z, &mut rng)?;
            let xi = r.xi.build(column(data, c), r.d_o, &mut rng)?;
            let nu = r.nu.build(&data.y, r.d_y, &mut rng)?;
            let p_v = Tensor3::random(r.d_x, r.d_z, r.d_o, &mut rng);
            let p_q = Tensor3::random(r.d_x, r.d_y, r.d_o, &mut rng);
            Ok(Representation::Factored(FactoredRepresentation::from_parts(
                setting, phi, psi, xi, nu, p_v, p_q,
            )?))
        }
    }
}

/// Spec bundle of a factored representation, for callers that build the
/// networks themselves.
pub fn factored_specs(rep: &FactoredRepresentation) -> FactoredSpecs {
    FactoredSpecs {
        phi: rep.phi.spec.clone(),
        psi: rep.psi.spec.clone(),
        xi: rep.xi.spec.clone(),
        nu: rep.nu.spec.clone(),
    }
}

/// Runs every training stage the setting needs.
pub fn train_stages(
    cfg: &ExperimentConfig,
    rep: &mut Representation,
    data: &Dataset,
    unlabeled: Option<&Dataset>,
    seed: u64,
) -> Result<Vec<TrainReport>> {
    if cfg.representation.exact_features {
        return Ok(vec![]);
    }
    let tc = |k: u64| cfg.train_config(sub_seed(seed, k));
    let mut reports = vec![];
    match data.setting {
        Setting::Iv => reports.push(train_representation(Stage::Iv, rep, data, unlabeled, &tc(0), false)?),
        Setting::Ivoc | Setting::Pcl => {
            let (first, second) = if data.setting == Setting::Ivoc {
                (Stage::IvocX, Stage::IvocY)
            } else {
                (Stage::PclW, Stage::PclY)
            };
            let skip = cfg.skip_treatment_stage && data.setting == Setting::Ivoc;
            if !skip {
                reports.push(train_representation(first, rep, data, unlabeled, &tc(0), false)?);
            }
            let joint = cfg.joint_outcome || skip;
            reports.push(train_representation(second, rep, data, None, &tc(1), joint)?);
        }
    }
    Ok(reports)
}

pub fn fit_solution(
    rep: &Representation,
    data: &Dataset,
    reg: &RegularizerSpec,
    solver: &SolverConfig,
) -> Result<Solution> {
    match rep {
        Representation::Iv(r) => Ok(Solution::Iv(solve_iv_saddle(r, data, reg, solver)?)),
        Representation::Factored(r) => Ok(Solution::Factored(match r.setting {
            ConditionalSetting::Ivoc => solve_ivoc_saddle(r, data, reg, solver)?,
            ConditionalSetting::Pcl => solve_pcl_saddle(r, data, reg, solver)?,
        })),
    }
}

/// Structural predictions at every row of `data`.
pub fn predict_dataset(sol: &Solution, rep: &Representation, data: &Dataset) -> Result<Vec<f64>> {
    let extra = match data.setting {
        Setting::Iv => None,
        Setting::Ivoc => data.o.as_ref(),
        Setting::Pcl => data.w.as_ref(),
    };
    predict_structural(sol, rep, &data.x, extra)
}

pub fn evaluate(sol: &Solution, rep: &Representation, data: &Dataset) -> Result<f64> {
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("evaluation data has no ground-truth column".into()))?;
    oos_mse(&predict_dataset(sol, rep, data)?, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaResult {
    pub lambda: f64,
    pub oos_mse: f64,
    pub gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub first: Option<f64>,
    pub last: Option<f64>,
    pub min: Option<f64>,
}

impl From<&TrainReport> for TraceSummary {
    fn from(r: &TrainReport) -> Self {
        let l = &r.epoch_losses;
        TraceSummary {
            stage: r.stage,
            epochs: l.len(),
            first: l.first().copied(),
            last: l.last().copied(),
            min: l.iter().copied().reduce(f64::min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub treatment: f64,
    pub estimate: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub generate_s: f64,
    pub train_rep_s: f64,
    pub solve_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub config_hash: String,
    pub setting: Setting,
    pub seed: u64,
    pub replicate: usize,
    pub replicate_seed: u64,
    pub status: String,
    pub failed_phase: Option<String>,
    pub error: Option<String>,
    pub oos_mse: Option<f64>,
    pub lambda_selected: Option<f64>,
    pub lambda_sweep: Vec<LambdaResult>,
    pub baseline_mses: BTreeMap<String, f64>,
    /// Least-squares slope of the fitted function on the test treatments
    /// (scalar-treatment IV only).
    pub fitted_slope: Option<f64>,
    pub effects: Vec<EffectRecord>,
    pub loss_traces: Vec<TraceSummary>,
    pub timings: PhaseTimings,
}

impl ResultRecord {
    /// Copy with wall-clock timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        ResultRecord {
            timings: PhaseTimings::default(),
            ..self.clone()
        }
    }
}

struct PhaseError {
    phase: &'static str,
    error: Error,
}

trait Phase<T> {
    fn phase(self, name: &'static str) -> std::result::Result<T, PhaseError>;
}

impl<T> Phase<T> for Result<T> {
    fn phase(self, name: &'static str) -> std::result::Result<T, PhaseError> {
        self.map_err(|error| PhaseError { phase: name, error })
    }
}

fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs one replicate. Failures are reported in the record, not as errors.
pub fn run_replicate(cfg: &ExperimentConfig, replicate: usize) -> ResultRecord {
    let seed = cfg.replicate_seed(replicate);
    let mut record = ResultRecord {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        setting: cfg.setting,
        seed: cfg.seed,
        replicate,
        replicate_seed: seed,
        status: "ok".into(),
        failed_phase: None,
        error: None,
        oos_mse: None,
        lambda_selected: None,
        lambda_sweep: vec![],
        baseline_mses: BTreeMap::new(),
        fitted_slope: None,
        effects: vec![],
        loss_traces: vec![],
        timings: PhaseTimings::default(),
    };
    if let Err(e) = replicate_body(cfg, seed, &mut record) {
        record.status = "failed".into();
        record.failed_phase = Some(e.phase.into());
        record.error = Some(e.error.to_string());
        record.oos_mse = None;
    }
    record
}

fn replicate_body(cfg: &ExperimentConfig, seed: u64, record: &mut ResultRecord) -> std::result::Result<(), PhaseError> {
    let t = Instant::now();
    let train = cfg
        .generator
        .generate(cfg.n_train, sub_seed(seed, stream::DATA))
        .phase("generate")?;
    let test = cfg
        .generator
        .generate_test(cfg.n_test, sub_seed(seed, stream::TEST))
        .phase("generate")?;
    if train.setting != cfg.setting || test.setting != cfg.setting {
        return Err(PhaseError {
            phase: "generate",
            error: Error::config("setting", "data files do not match the configured setting"),
        });
    }
    let unlabeled = if cfg.unlabeled_n > 0 {
        Some(
            cfg.generator
                .generate(cfg.unlabeled_n, sub_seed(seed, stream::UNLABELED))
                .phase("generate")?,
        )
    } else {
        None
    };
    let (rep_data, est_data) = if cfg.split_rep_estimation {
        train.split(0.5, sub_seed(seed, stream::SPLIT))
    } else {
        (train.clone(), train.clone())
    };
    record.timings.generate_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut rep = build_representation(cfg, &rep_data, sub_seed(seed, stream::INIT)).phase("train_rep")?;
    let reports = train_stages(
        cfg,
        &mut rep,
        &rep_data,
        unlabeled.as_ref(),
        sub_seed(seed, stream::TRAIN),
    )
    .phase("train_rep")?;
    record.loss_traces = reports.iter().map(TraceSummary::from).collect();
    record.timings.train_rep_s = t.elapsed().as_secs_f64();

    let mut solve_s = 0.0;
    let mut eval_s = 0.0;
    let mut best: Option<(f64, Solution)> = None;
    for &lambda in &cfg.lambdas {
        let reg = RegularizerSpec {
            kind: cfg.regularizer,
            lambda,
        };
        let t = Instant::now();
        let sol = fit_solution(&rep, &est_data, &reg, &cfg.solver).phase("solve")?;
        solve_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let mse = evaluate(&sol, &rep, &test).phase("evaluate")?;
        eval_s += t.elapsed().as_secs_f64();
        let diag = match &sol {
            Solution::Iv(s) => s.diagnostics,
            Solution::Factored(s) => s.diagnostics,
        };
        record.lambda_sweep.push(LambdaResult {
            lambda,
            oos_mse: mse,
            gap: diag.gap,
            iterations: diag.iterations,
        });
        if best.as_ref().is_none_or(|(m, _)| mse < *m) {
            best = Some((mse, sol));
        }
    }
    let (mse, sol) = best.expect("at least one lambda");
    record.oos_mse = Some(mse);
    record.lambda_selected = record.lambda_sweep.iter().find(|r| r.oos_mse == mse).map(|r| r.lambda);

    let t = Instant::now();
    if cfg.setting == Setting::Iv && test.x.cols() == 1 {
        let pred = predict_dataset(&sol, &rep, &test).phase("evaluate")?;
        record.fitted_slope = ols_slope(&test.x.col(0), &pred);
    }
    if let (GeneratorConfig::PclDiscrete { spec }, Representation::Factored(r), Solution::Factored(s)) =
        (&cfg.generator, &rep, &sol)
    {
        let spec = cfg.generator.pcl_spec(spec);
        let truth = bridge_effects(&spec, &solve_bridge_exact(&spec).phase("evaluate")?).phase("evaluate")?;
        let w = test.w.as_ref().expect("PCL test data has w");
        for (level, t) in truth.iter().enumerate() {
            let estimate = pcl_causal_effect(s, r, &[level as f64], w).phase("evaluate")?;
            record.effects.push(EffectRecord {
                treatment: level as f64,
                estimate,
                truth: *t,
            });
        }
    }
    if matches!(cfg.setting, Setting::Iv | Setting::Ivoc) {
        let truth = test.truth.as_ref();
        for kind in &cfg.baselines {
            let name = serde_json::to_value(kind)
                .expect("kind serializes")
                .as_str()
                .unwrap_or_default()
                .to_string();
            let fit = baseline_fit(*kind, &est_data, cfg.baseline_lambda).phase("baseline")?;
            if let Some(truth) = truth {
                let pred = fit.predict(&test.x, test.o.as_ref()).phase("baseline")?;
                record
                    .baseline_mses
                    .insert(name, oos_mse(&pred, truth).phase("baseline")?);
            }
        }
    }
    eval_s += t.elapsed().as_secs_f64();
    record.timings.solve_s = solve_s;
    record.timings.evaluate_s = eval_s;
    Ok(())
}

/// Runs all replicates, in parallel on the current rayon pool. Record order
/// follows the replicate index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    Ok((0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect())
}

/// Append-only result sink: one JSON-lines file and one CSV summary per run,
/// named `results-{unix_millis}-{hash8}` and never overwriting.
pub struct ResultWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    pub jsonl_path: PathBuf,
    pub csv_path: PathBuf,
}

const CSV_HEADER: [&str; 12] = [
    "name",
    "config_hash",
    "setting",
    "seed",
    "replicate",
    "replicate_seed",
    "status",
    "oos_mse",
    "lambda_selected",
    "direct_ridge_mse",
    "two_stage_ls_mse",
    "total_seconds",
];

impl ResultWriter {
    pub fn create(dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let hash8 = &config_hash[..config_hash.len().min(8)];
        for attempt in 0u32.. {
            let stem = if attempt == 0 {
                format!("results-{millis}-{hash8}")
            } else {
                format!("results-{millis}-{hash8}-{attempt}")
            };
            let jsonl_path = dir.join(format!("{stem}.jsonl"));
            let csv_path = dir.join(format!("{stem}.csv"));
            let jsonl = match OpenOptions::new().write(true).create_new(true).open(&jsonl_path) {
                Ok(f) => f,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            };
            let csv_file = match OpenOptions::new().write(true).create_new(true).open(&csv_path) {
                Ok(f) => f,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    drop(jsonl);
                    std::fs::remove_file(&jsonl_path)?;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let mut csv = csv::Writer::from_writer(csv_file);
            csv.write_record(CSV_HEADER)?;
            return Ok(ResultWriter {
                jsonl: BufWriter::new(jsonl),
                csv,
                jsonl_path,
                csv_path,
            });
        }
        unreachable!("attempt counter is unbounded")
    }

    pub fn write(&mut self, r: &ResultRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, r)?;
        self.jsonl.write_all(b"\n")?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let t = &r.timings;
        let setting = serde_json::to_value(r.setting)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        self.csv.write_record([
            r.name.clone(),
            r.config_hash.clone(),
            setting,
            r.seed.to_string(),
            r.replicate.to_string(),
            r.replicate_seed.to_string(),
            r.status.clone(),
            opt(r.oos_mse),
            opt(r.lambda_selected),
            opt(r.baseline_mses.get("direct_ridge").copied()),
            opt(r.baseline_mses.get("two_stage_ls").copied()),
            (t.generate_s + t.train_rep_s + t.solve_s + t.evaluate_s).to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.jsonl.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_iv() -> ExperimentConfig {
        ExperimentConfig {
            n_train: 400,
            n_test: 100,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_round_trip_and_unknown_fields_fail() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let err = ExperimentConfig::from_json(r#"{"n_tset": 3}"#).unwrap_err();
        assert!(err.is_config_error() && err.to_string().contains("n_tset"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"generator": {"name": "demand_design", "rho": 0.5, "bogus": 1}, "setting": "ivoc"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"n_test": 0}"#).unwrap_err();
        assert!(
            matches!(&err, Error::Config { field, .. } if field == "n_test"),
            "{err}"
        );
        let err = ExperimentConfig::from_json(r#"{"replicates": 0}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "replicates"));
        let err = ExperimentConfig::from_json(r#"{"setting": "pcl"}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "setting"));
        let err = ExperimentConfig::from_json(r#"{"lambdas": [-1.0]}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "lambdas"));
    }

    #[test]
    fn exact_feature_slope() {
        let cfg = ExperimentConfig {
            n_train: 10_000,
            representation: RepConfig {
                exact_features: true,
                ..Default::default()
            },
            lambdas: vec![0.0],
            split_rep_estimation: false,
            ..Default::default()
        };
        let rec = run_replicate(&cfg, 0);
        assert_eq!(rec.status, "ok", "{:?}", rec.error);
        let slope = rec.fitted_slope.unwrap();
        assert!((slope - 2.0).abs() < 0.1, "{slope}");
        assert!(rec.baseline_mses["direct_ridge"] > rec.oos_mse.unwrap());
    }

    #[test]
    fn replicates_without_sub_seeds_are_identical() {
        let cfg = ExperimentConfig {
            replicates: 3,
            replicate_sub_seeds: false,
            ..small_iv()
        };
        let recs = run_experiment(&cfg).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.replicate, i);
            let mut a = r.without_timings();
            a.replicate = 0;
            assert_eq!(a, recs[0].without_timings());
        }
    }

    #[test]
    fn failures_are_recorded_per_phase() {
        let cfg = ExperimentConfig {
            generator: GeneratorConfig::File {
                train: "/nonexistent/train.csv".into(),
                test: "/nonexistent/test.csv".into(),
            },
            ..small_iv()
        };
        let rec = run_replicate(&cfg, 0);
        assert_eq!(rec.status, "failed");
        assert_eq!(rec.failed_phase.as_deref(), Some("generate"));
        assert!(rec.oos_mse.is_none());
    }

    #[test]
    fn writer_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_replicate(&small_iv(), 0);
        let mut paths = vec![];
        for _ in 0..3 {
            let mut w = ResultWriter::create(dir.path(), "0123456789abcdef").unwrap();
            w.write(&rec).unwrap();
            paths.push(w.jsonl_path.clone());
            w.finish().unwrap();
        }
        paths.sort();
        paths.dedup();
        assert_eq!(paths.len(), 3);
        let line = std::fs::read_to_string(&paths[0]).unwrap();
        let back: ResultRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, rec);
        assert!(paths[0].file_name().unwrap().to_str().unwrap().starts_with("results-"));
    }
}
