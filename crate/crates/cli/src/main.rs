use std::net::{IpAddr, SocketAddr};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use promp_core::estimators::{fit_em_map, fit_em_mle, fit_ridge, EmConfig, EmInit, NiwPrior};
use promp_core::io::{load_params, read_dataset, save_params, write_dataset, ProMPFile};
use promp_core::metrics::DistanceSpace;
use promp_core::synthlab::{
    adaptation_preset, build_reference_promp, compare_preset, generate_seed_trajectories, panda_preset,
    progress_preset, sample_dataset, ReferenceSpec,
};
use promp_core::{BasisConfig, Demonstration, Error, MetricReport, StepwiseConfig, StepwiseState};
use promp_service::ServiceConfig;
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "promp", version, about = "Train, evaluate and serve probabilistic movement primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic reference ProMP
    GenRef {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw demonstrations from a ProMP into a directory of CSV files
    Sample {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a ProMP to a directory of CSV demonstrations
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Basis functions per DOF; taken from --init or --resume when given.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.75)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        passes: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 1e-12)]
        lambda: f64,
        #[arg(long, default_value_t = 1)]
        minibatch: usize,
        #[arg(long, default_value_t = 0.0)]
        delta_min: f64,
        /// Starting parameters for the EM fits.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a stepwise run saved with its learner state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model against a reference; prints a metric report
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Space::Weight)]
        space: Space,
        /// Phase grid for the trajectory-space distance.
        #[arg(long, default_value_t = 100)]
        grid: usize,
    },
    /// Run a synthetic experiment and write its results as JSON
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP and WebSocket session service
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long, default_value_t = promp_service::session::DEFAULT_QUEUE_LIMIT)]
        queue_limit: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Ridge,
    EmMle,
    EmMap,
    Sem,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Space {
    Weight,
    Trajectory,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Compare,
    Progress,
    Adapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Panda,
}

struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::SingularCovariance(_) => EXIT_NUMERICAL,
            Error::Config(_) | Error::InvalidCount(_) | Error::InvalidSplit(_) | Error::InvalidPrior(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure { exit, code: e.code(), message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { exit: EXIT_USAGE, code: "usage", message: message.into() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(usage(e.to_string().trim_end())),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": f.code, "message": f.message }));
    ExitCode::from(f.exit)
}

fn print_json(value: &Value) {
    emit(&serde_json::to_string_pretty(value).expect("json serializes"));
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|_| out.flush());
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenRef { k, d, seed, out } => {
            let spec = ReferenceSpec::new(k, d, seed);
            let reference = build_reference_promp(&generate_seed_trajectories(&spec)?, &spec)?;
            save_params(&out, &reference)?;
            print_json(&json!({ "K": k, "D": d, "seed": seed, "out": out }));
        }
        Command::Sample { reference, n, steps, seed, out } => {
            let params = load_params(&reference)?;
            let demos = sample_dataset(&params, n, steps, seed)?;
            write_dataset(&out, &demos)?;
            print_json(&json!({ "demos": n, "steps": steps, "out": out }));
        }
        Command::Train { data, algo, k, beta, passes, iters, lambda, minibatch, delta_min, init, resume, out } => {
            let demos = read_dataset(&data)?;
            train(
                &demos,
                algo,
                TrainOptions { k, beta, passes, iters, lambda, minibatch, delta_min, init, resume, out },
            )?;
        }
        Command::Eval { reference, model, space, grid } => {
            let reference = load_params(&reference)?;
            let model = load_params(&model)?;
            if reference.basis != model.basis {
                return Err(Failure {
                    exit: EXIT_DATA,
                    code: "dimension_mismatch",
                    message: "model and reference use different bases".into(),
                });
            }
            let space = match space {
                Space::Weight => DistanceSpace::Weight,
                Space::Trajectory if grid >= 1 => DistanceSpace::Trajectory { grid },
                Space::Trajectory => return Err(usage("--grid must be at least 1")),
            };
            let report = MetricReport::compare_in(&reference, &model, None, space)?;
            print_json(&serde_json::to_value(report).expect("report serializes"));
        }
        Command::Experiment { kind, seed, preset, out } => {
            let result = match (kind, preset) {
                (ExperimentKind::Compare, None) => serde_json::to_value(compare_preset(seed)?),
                (ExperimentKind::Progress, None) => serde_json::to_value(progress_preset(seed)?),
                (ExperimentKind::Adapt, None) => serde_json::to_value(adaptation_preset(seed)?),
                (ExperimentKind::Adapt, Some(Preset::Panda)) => serde_json::to_value(panda_preset(seed)?),
                (_, Some(Preset::Panda)) => return Err(usage("--preset panda only applies to the adapt experiment")),
            }
            .expect("results serialize");
            write_output(out.as_deref(), &result)?;
        }
        Command::Serve { host, port, snapshot_dir, cors_origin, queue_limit } => {
            let config = ServiceConfig { snapshot_dir, cors_origin, queue_limit };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
                exit: 1,
                code: "runtime",
                message: e.to_string(),
            })?;
            runtime.block_on(promp_service::serve(SocketAddr::new(host, port), config)).map_err(|e| Failure {
                exit: EXIT_DATA,
                code: "serve",
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

fn write_output(out: Option<&Path>, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| Failure {
            exit: EXIT_DATA,
            code: "data_error",
            message: format!("{}: {e}", path.display()),
        }),
        None => {
            emit(&text);
            Ok(())
        }
    }
}

struct TrainOptions {
    k: usize,
    beta: f64,
    passes: usize,
    iters: usize,
    lambda: f64,
    minibatch: usize,
    delta_min: f64,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: PathBuf,
}

fn train(demos: &[Demonstration], algo: Algo, opt: TrainOptions) -> Result<(), Failure> {
    let d = demos[0].dim();
    let init = opt.init.as_deref().map(load_params).transpose()?;
    let basis = match &init {
        Some(p) => p.basis.clone(),
        None => BasisConfig::new(opt.k, d)?,
    };
    if opt.resume.is_some() && !matches!(algo, Algo::Sem) {
        return Err(usage("--resume only applies to --algo sem"));
    }
    if init.is_some() && !matches!(algo, Algo::EmMle | Algo::EmMap) {
        return Err(usage("--init only applies to the EM fits"));
    }
    let em = EmConfig {
        iterations: opt.iters,
        init: match init {
            Some(p) => EmInit::Params(p),
            None => EmInit::Ridge { lambda: opt.lambda },
        },
        ..EmConfig::default()
    };
    let (file, summary) = match algo {
        Algo::Ridge => {
            let fit = fit_ridge(demos, &basis, opt.lambda)?;
            (ProMPFile::from_params(&fit.params), json!({ "log_likelihood": fit.log_likelihood_trace.last() }))
        }
        Algo::EmMle | Algo::EmMap => {
            let fit = match algo {
                Algo::EmMle => fit_em_mle(demos, &basis, &em)?,
                _ => fit_em_map(demos, &basis, &em, &NiwPrior::standard(&basis))?,
            };
            let summary = json!({ "iterations": fit.iterations, "objective_trace": fit.log_likelihood_trace });
            (ProMPFile::from_params(&fit.params), summary)
        }
        Algo::Sem => {
            let (mut state, mut config) = match &opt.resume {
                Some(path) => ProMPFile::load(path)?.to_state()?.ok_or_else(|| Failure {
                    exit: EXIT_DATA,
                    code: "data_error",
                    message: format!("{} holds no learner state", path.display()),
                })?,
                None => {
                    let config = StepwiseConfig::new(&basis, opt.beta).with_delta_min(opt.delta_min);
                    (StepwiseState::init(&config, basis.clone())?, config)
                }
            };
            config.minibatch_size = opt.minibatch;
            config.validate(&state.params.basis)?;
            for _ in 0..opt.passes {
                for chunk in demos.chunks(opt.minibatch) {
                    state.add_minibatch(&config, chunk)?;
                }
            }
            (ProMPFile::from_state(&state, &config), json!({ "n": state.n, "next_delta": state.delta }))
        }
    };
    file.save(&opt.out)?;
    let mut report = json!({ "demos": demos.len(), "K": file.k, "D": file.d, "out": opt.out });
    report.as_object_mut().unwrap().extend(summary.as_object().unwrap().clone());
    print_json(&report);
    Ok(())
}
