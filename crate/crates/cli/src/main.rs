//! `sdda` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdda_core::config::RunConfig;
use sdda_core::data::{load_dataset, save_dataset, synth_generate, Domain, DomainRole, SynthSpec};
use sdda_core::error::Error;
use sdda_core::evaluation::{self, history_json, run_experiment_file, Variant};
use sdda_core::model::Network;
use sdda_core::report::JsonVal;
use sdda_core::training::{self, EaPolicy};

#[derive(Parser)]
#[command(
    name = "sdda",
    about = "Cross-headset transfer learning: spatial distillation with \
             input/feature/output distribution alignment",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target domain pair.
    Synth {
        /// TOML file with generator parameters.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (writes source.sdda and target.sdda).
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply session-wise Euclidean alignment to a dataset.
    Align {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one (scenario, variant, seed) cell and write checkpoints.
    Train {
        /// Experiment config (first scenario/variant/seed are used).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a student checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Calibration trials per the supervised scenario.
        #[arg(long, default_value_t = 32)]
        n_labeled: usize,
        /// Report file (defaults to eval_report.json next to the dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full sweep from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute the gradient-check suite.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Uda,
    Sda,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec: SynthSpec =
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            spec.validate()?;
            let (source, target) = synth_generate(&spec)?;
            std::fs::create_dir_all(&out)?;
            save_dataset(&source, &out.join("source.sdda"))?;
            save_dataset(&target, &out.join("target.sdda"))?;
            println!(
                "wrote {} source trials and {} target trials to {}",
                source.n_trials(),
                target.n_trials(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Align { input, out } => {
            let domain = load_dataset(&input, DomainRole::Source)?;
            let sessions = domain
                .sessions()
                .iter()
                .map(sdda_core::alignment::euclidean_align_session)
                .collect::<Result<Vec<_>, _>>()?;
            let aligned = Domain::new(sessions, domain.role(), domain.classes())?;
            save_dataset(&aligned, &out)?;
            println!(
                "aligned {} sessions to {}",
                aligned.sessions().len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out } => {
            let run = RunConfig::from_path(&config)?;
            let scenario = run.scenarios[0];
            let variant = Variant::parse(&run.variants[0])?;
            let seed = run.seeds[0];
            let (source, target) = resolve_data(&run)?;
            let train_config = run.train_config(scenario, variant, seed);
            let output = training::train_sdda(&train_config, &source, &target)?;
            std::fs::create_dir_all(&out)?;
            output.student.save_checkpoint(&out.join("student.ckpt"))?;
            output.teacher.save_checkpoint(&out.join("teacher.ckpt"))?;
            std::fs::write(
                out.join("history.json"),
                history_json(&output.history).to_string_canonical(),
            )?;
            let last = output.history.epochs.last().expect("at least one epoch");
            println!(
                "trained variant {} ({:?}, seed {seed}): final {} = {:.2}, checkpoints in {}",
                variant.name(),
                scenario,
                output.history.metric_name,
                last.metric,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            student,
            data,
            scenario,
            n_labeled,
            out,
        } => {
            let student = Network::<f32>::load_checkpoint(&student)?;
            let domain = load_dataset(&data, DomainRole::Target)?;
            let report = eval_checkpoint(&student, &domain, scenario, n_labeled)?;
            let out = out.unwrap_or_else(|| {
                data.parent()
                    .unwrap_or(Path::new("."))
                    .join("eval_report.json")
            });
            std::fs::write(&out, report.to_string_canonical())?;
            println!("{}", report.to_string_canonical());
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, out } => {
            let report = run_experiment_file(&config, &out)?;
            for aggregate in &report.aggregates {
                println!(
                    "{:?} {:10} mean accuracy {:6.2} ± {:5.2} over {} seeds",
                    aggregate.scenario,
                    aggregate.variant.name(),
                    aggregate.mean_accuracy,
                    aggregate.std_accuracy,
                    aggregate.n_seeds
                );
            }
            println!("report written to {}", out.join("report.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let report = sdda_core::checks::gradient_check_suite()?;
            for item in &report.items {
                println!(
                    "{} {:32} max rel error {:9.3e}",
                    if item.pass { "PASS" } else { "FAIL" },
                    item.name,
                    item.max_rel_error
                );
            }
            if report.pass() {
                println!("gradient checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Numerical("gradient check suite failed".into()))
            }
        }
    }
}

fn resolve_data(run: &RunConfig) -> Result<(Domain, Domain), Error> {
    match (&run.synth, &run.data) {
        (Some(spec), None) => Ok(synth_generate(spec)?),
        (None, Some(paths)) => Ok((
            load_dataset(Path::new(&paths.source), DomainRole::Source)?,
            load_dataset(Path::new(&paths.target), DomainRole::Target)?,
        )),
        _ => Err(Error::Config(
            "config must set exactly one of [synth] or [data]".into(),
        )),
    }
}

fn eval_checkpoint(
    student: &Network<f32>,
    domain: &Domain,
    scenario: ScenarioArg,
    n_labeled: usize,
) -> Result<JsonVal, Error> {
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut scores = Vec::new();
    match scenario {
        ScenarioArg::Uda => {
            for session in domain.sessions() {
                let pred = training::predict(student, session, EaPolicy::Joint)?;
                collect(session, &pred, &mut predicted, &mut truth, &mut scores)?;
            }
        }
        ScenarioArg::Sda => {
            // calibration prefix defines the frozen reference per session
            let per_session = (n_labeled / domain.sessions().len()).max(1);
            for session in domain.sessions() {
                let k = per_session.min(session.n_trials().saturating_sub(1)).max(1);
                let calib = sdda_core::alignment::Session::new(
                    session.trials()[..k].to_vec(),
                    session.channel_names().to_vec(),
                    session.sampling_rate(),
                )?;
                let reference = sdda_core::alignment::mean_covariance(&calib)?;
                let held = sdda_core::alignment::Session::new(
                    session.trials()[k..].to_vec(),
                    session.channel_names().to_vec(),
                    session.sampling_rate(),
                )?;
                let pred = training::predict(student, &held, EaPolicy::Frozen(&reference))?;
                collect(&held, &pred, &mut predicted, &mut truth, &mut scores)?;
            }
        }
    }
    let accuracy = evaluation::accuracy(&predicted, &truth)?;
    let auc = if domain.classes() == 2 {
        let binary: Vec<bool> = truth.iter().map(|&l| l == 1).collect();
        evaluation::auc(&scores, &binary).ok()
    } else {
        None
    };
    Ok(JsonVal::obj(vec![
        ("trials", JsonVal::UInt(truth.len() as u64)),
        ("accuracy", JsonVal::Num(accuracy)),
        ("auc", auc.map(JsonVal::Num).unwrap_or(JsonVal::Null)),
        (
            "scenario",
            JsonVal::Str(
                match scenario {
                    ScenarioArg::Uda => "uda",
                    ScenarioArg::Sda => "sda",
                }
                .into(),
            ),
        ),
    ]))
}

fn collect(
    session: &sdda_core::alignment::Session,
    pred: &training::Prediction,
    predicted: &mut Vec<u16>,
    truth: &mut Vec<u16>,
    scores: &mut Vec<f64>,
) -> Result<(), Error> {
    for (i, trial) in session.trials().iter().enumerate() {
        let label = trial
            .label()
            .ok_or_else(|| Error::Data("evaluation dataset must be labeled".into()))?;
        truth.push(label);
        predicted.push(pred.labels[i]);
        if pred.scores.shape()[1] >= 2 {
            scores.push(pred.scores.at2(i, 1) as f64);
        }
    }
    Ok(())
}

