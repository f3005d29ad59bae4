use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spectral_causal::benchdata::Dataset;
use spectral_causal::checkpoint::Checkpoint;
use spectral_causal::checks;
use spectral_causal::error::{Error, Result};
use spectral_causal::experiment::{
    build_representation, evaluate, fit_solution, run_experiment, stream, train_stages, ExperimentConfig, ResultWriter,
    TraceSummary,
};
use spectral_causal::rng::sub_seed;
use spectral_causal::saddle::RegularizerSpec;

#[derive(Parser)]
#[command(
    name = "spectral-causal",
    version,
    about = "Spectral representation causal estimation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SPECTRAL_CAUSAL_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads for replicate parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    Gen,
    /// Train the representation on a dataset.
    TrainRep {
        /// Training data; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Solve the saddle problem on a trained representation.
    Fit {
        #[arg(long)]
        rep: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the first value of the config's λ sweep.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Out-of-sample MSE of a fitted model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full pipeline over all replicates.
    Experiment,
    /// Gradient, identity and solver self-checks.
    Check,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn seed(&self) -> u64 {
        self.cfg.replicate_seed(0)
    }

    fn train_data(&self, path: Option<&Path>) -> Result<Dataset> {
        match path {
            Some(p) => Dataset::load(p),
            None => self
                .cfg
                .generator
                .generate(self.cfg.n_train, sub_seed(self.seed(), stream::DATA)),
        }
    }

    fn test_data(&self, path: Option<&Path>) -> Result<Dataset> {
        match path {
            Some(p) => Dataset::load(p),
            None => self
                .cfg
                .generator
                .generate_test(self.cfg.n_test, sub_seed(self.seed(), stream::TEST)),
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                field: "--config".into(),
                reason: format!("{}: {e}", p.display()),
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "--threads".into(),
                reason: "must be positive".into(),
            });
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx {
        cfg,
        out: cli.global.out.clone(),
        verbose: cli.global.verbose,
    };
    match cli.command {
        Command::Gen => {
            let train = ctx.train_data(None)?;
            let test = ctx.test_data(None)?;
            let (tp, sp) = (ctx.out_file("train.csv")?, ctx.out_file("test.csv")?);
            train.save(&tp)?;
            test.save(&sp)?;
            println!(
                "{}",
                json!({"train": tp, "test": sp, "n_train": train.n(), "n_test": test.n()})
            );
        }
        Command::TrainRep { data } => {
            let data = ctx.train_data(data.as_deref())?;
            let seed = ctx.seed();
            let mut rep = build_representation(&ctx.cfg, &data, sub_seed(seed, stream::INIT))?;
            ctx.log(format!("training on {} rows", data.n()));
            let reports = train_stages(&ctx.cfg, &mut rep, &data, None, sub_seed(seed, stream::TRAIN))?;
            let traces: Vec<TraceSummary> = reports.iter().map(TraceSummary::from).collect();
            for t in &traces {
                ctx.log(format!("{t:?}"));
            }
            let path = ctx.out_file("rep.ckpt")?;
            Checkpoint::from_representation(&rep, json!({"config_hash": ctx.cfg.hash(), "loss_traces": traces}))
                .save(&path)?;
            println!("{}", json!({"checkpoint": path}));
        }
        Command::Fit { rep, data, lambda } => {
            let rep = Checkpoint::load(&rep)?.representation()?;
            let data = ctx.train_data(data.as_deref())?;
            let lambda = lambda.unwrap_or(ctx.cfg.lambdas[0]);
            let reg = RegularizerSpec {
                kind: ctx.cfg.regularizer,
                lambda,
            };
            reg.validate().map_err(|e| Error::Config {
                field: "--lambda".into(),
                reason: e.to_string(),
            })?;
            let sol = fit_solution(&rep, &data, &reg, &ctx.cfg.solver)?;
            let path = ctx.out_file("model.ckpt")?;
            Checkpoint::from_model(&rep, &sol, json!({"config_hash": ctx.cfg.hash()}))?.save(&path)?;
            println!("{}", json!({"checkpoint": path, "lambda": lambda}));
        }
        Command::Eval { model, data } => {
            let ck = Checkpoint::load(&model)?;
            let (rep, sol) = (ck.representation()?, ck.solution()?);
            let data = ctx.test_data(data.as_deref())?;
            let mse = evaluate(&sol, &rep, &data)?;
            println!("{}", json!({"oos_mse": mse, "n": data.n()}));
        }
        Command::Experiment => {
            ctx.log(format!(
                "config {} with {} replicate(s)",
                ctx.cfg.hash(),
                ctx.cfg.replicates
            ));
            let records = run_experiment(&ctx.cfg)?;
            let mut writer = ResultWriter::create(&ctx.out, &ctx.cfg.hash())?;
            let mut ok = true;
            for r in &records {
                writer.write(r)?;
                ok &= r.status == "ok";
                ctx.log(format!("replicate {}: {} mse {:?}", r.replicate, r.status, r.oos_mse));
            }
            let (jp, cp) = (writer.jsonl_path.clone(), writer.csv_path.clone());
            writer.finish()?;
            println!("{}", json!({"jsonl": jp, "csv": cp, "records": records.len()}));
            return Ok(ok);
        }
        Command::Check => {
            let mut ok = true;
            for c in checks::run_all(ctx.cfg.seed) {
                ok &= c.passed;
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
