use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use wastebot::plant::{self, scenarios, DatasetLog, Excitation, JointPlantParams, DEFAULT_DT};
use wastebot::sysid::{self, PredictorSeries, RecurrentModel, RecurrentPredictor, SysidTrainConfig};

use crate::manifest::Run;
use crate::{CliError, CliResult, Common};

#[derive(Debug, Subcommand)]
pub enum PlantCommand {
    /// Replay a command file on the plant and log every step.
    Run(PlantRunArgs),
    /// Write the command series of an excitation without simulating.
    Chirp(ExcitationArgs),
    /// Collect an identification log under an excitation.
    Collect(ExcitationArgs),
}

#[derive(Debug, Args)]
pub struct PlantRunArgs {
    /// `--config` overlays the canonical plant parameters.
    #[command(flatten)]
    common: Common,
    /// Commands in [-1, 1]: a JSON array, or text with the command as the
    /// last field of each line (non-numeric lines are skipped).
    #[arg(long)]
    commands: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scenario {
    /// Rest, then three falling-frequency sweeps of modest amplitude.
    Canonical,
    /// The canonical sweep at amplitudes reaching the whole stroke.
    HighAmplitude,
    /// Joystick-like random walk.
    HeldOutWalk,
    /// The canonical sweep from an already warm machine.
    TemperatureSweep,
}

#[derive(Debug, Args)]
pub struct ExcitationArgs {
    /// `--config` overlays the canonical plant parameters.
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Scenario::Canonical)]
    scenario: Scenario,
    /// JSON excitation replacing the scenario's.
    #[arg(long)]
    excitation: Option<PathBuf>,
    /// Seconds; defaults to the scenario's length.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
}

fn plant_params(common: &Common) -> CliResult<JointPlantParams> {
    let p = common.config(JointPlantParams::canonical())?;
    p.validate()?;
    Ok(p)
}

fn read_commands(path: &Path) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(text
        .lines()
        .filter_map(|l| l.rsplit(',').next()?.trim().parse::<f64>().ok())
        .collect())
}

fn excitation_of(run: &mut Run, args: &ExcitationArgs) -> CliResult<(Excitation, f64)> {
    let (mut e, duration) = match args.scenario {
        Scenario::Canonical => (scenarios::canonical_chirp(), scenarios::CHIRP_LOG_DURATION),
        Scenario::HighAmplitude => (scenarios::high_amplitude_chirp(), scenarios::CHIRP_LOG_DURATION),
        Scenario::HeldOutWalk => (scenarios::held_out_walk(), scenarios::HELD_OUT_DURATION),
        Scenario::TemperatureSweep => (scenarios::canonical_chirp(), scenarios::CHIRP_LOG_DURATION),
    };
    if let Some(p) = &args.excitation {
        run.input(p)?;
        e = serde_json::from_slice(&std::fs::read(p)?)?;
    }
    Ok((e, args.duration.unwrap_or(duration)))
}

fn write_log(run: &mut Run, log: &DatasetLog) -> CliResult<()> {
    log.write(&run.path("log.csv"))?;
    run.record("log.csv")?;
    run.record("log.csv.json")?;
    Ok(())
}

pub fn plant(command: PlantCommand, argv: &[String]) -> CliResult<()> {
    match command {
        PlantCommand::Run(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let params = plant_params(&a.common)?;
            run.input(&a.commands)?;
            let commands = read_commands(&a.commands)?;
            if commands.is_empty() {
                return Err(CliError::Core(wastebot::Error::Format(
                    "command file holds no commands".into(),
                )));
            }
            let seed = a.common.seed.unwrap_or(0);
            run.set_seed(seed);
            let duration = commands.len() as f64 * a.dt;
            let log = plant::collect_dataset(&params, &Excitation::Replay { commands }, duration, a.dt, seed)?;
            write_log(&mut run, &log)?;
            run.finish()?;
            let last = log.records.last().expect("non-empty log");
            println!("{} steps, final sensor position {:.4} rad", log.len(), last.s);
        }
        PlantCommand::Chirp(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let (excitation, duration) = excitation_of(&mut run, &a)?;
            let seed = a.common.seed.unwrap_or(0);
            run.set_seed(seed);
            let n = (duration / a.dt).round() as usize;
            let commands = excitation.commands(n, a.dt, seed)?;
            let mut csv = String::from("t,u\n");
            for (k, u) in commands.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", k as f64 * a.dt, u));
            }
            run.write("commands.csv", csv.as_bytes())?;
            run.write_json("excitation.json", &excitation)?;
            run.finish()?;
            println!("{}: {n} commands", excitation.describe());
        }
        PlantCommand::Collect(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let params = plant_params(&a.common)?;
            let seed = a.common.seed.unwrap_or(0);
            run.set_seed(seed);
            let log = match (a.scenario, &a.excitation, a.duration) {
                (Scenario::TemperatureSweep, None, None) if a.dt == DEFAULT_DT => {
                    scenarios::temperature_sweep(&params, seed)?
                }
                (Scenario::TemperatureSweep, ..) => {
                    return Err(CliError::Usage(
                        "the temperature sweep has a fixed excitation, duration and dt".into(),
                    ))
                }
                _ => {
                    let (excitation, duration) = excitation_of(&mut run, &a)?;
                    plant::collect_dataset(&params, &excitation, duration, a.dt, seed)?
                }
            };
            write_log(&mut run, &log)?;
            run.finish()?;
            println!("{}: {} rows", log.meta.description, log.len());
        }
    }
    Ok(())
}

#[derive(Debug, Subcommand)]
pub enum PredictorCommand {
    /// Train the recurrent predictor on a plant log.
    Train(PredictorTrainArgs),
    /// Score a predictor on a log.
    Eval(PredictorEvalArgs),
    /// Compare BPTT gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PredictorTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Input {
    Sensor,
    Rpm,
    Temperature,
    Command,
}

impl Input {
    fn index(self) -> usize {
        match self {
            Input::Sensor => sysid::IN_SENSOR,
            Input::Rpm => sysid::IN_RPM,
            Input::Temperature => sysid::IN_TEMP,
            Input::Command => sysid::IN_COMMAND,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictorEvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Feed back the integrated prediction instead of the recorded position.
    #[arg(long, conflicts_with = "ablate")]
    free_running: bool,
    /// Hold one input at its training mean.
    #[arg(long, value_enum)]
    ablate: Option<Input>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Trained model; a seeded random one is checked otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 20)]
    len: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

pub(crate) fn read_model(run: &mut Run, path: &Path) -> CliResult<RecurrentModel> {
    run.input(path)?;
    let model: RecurrentModel = serde_json::from_slice(&std::fs::read(path)?)?;
    model.validate()?;
    Ok(model)
}

fn read_log(run: &mut Run, path: &Path) -> CliResult<DatasetLog> {
    run.input(path)?;
    run.input(&DatasetLog::sidecar_path(path))?;
    Ok(DatasetLog::read(path)?)
}

fn write_eval(run: &mut Run, stem: &str, report: &sysid::EvalReport, extra: serde_json::Value) -> CliResult<()> {
    let mut summary = report.summary();
    if let (Some(s), serde_json::Value::Object(e)) = (summary.as_object_mut(), extra) {
        s.extend(e);
    }
    run.write_json(&format!("{stem}.json"), &summary)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    run.write(&format!("{stem}.csv"), &csv)?;
    Ok(())
}

pub fn predictor(command: PredictorCommand, argv: &[String]) -> CliResult<()> {
    match command {
        PredictorCommand::Train(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let mut cfg = a.common.config(SysidTrainConfig::default())?;
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            run.set_seed(cfg.seed);
            let log = read_log(&mut run, &a.log)?;
            let trained = sysid::train_predictor(&log, &cfg)?;
            let fit = sysid::evaluate_predictor(&trained.model, &log)?;
            run.write_json("model.json", &trained.model)?;
            run.write_json(
                "training.json",
                &serde_json::json!({"epoch_losses": trained.epoch_losses}),
            )?;
            write_eval(&mut run, "fit", &fit, serde_json::json!({"mode": "teacher_forced"}))?;
            run.finish()?;
            println!(
                "training fit: max |error| {:.4} rad/s, rmse {:.4} rad/s",
                fit.max_abs_error, fit.rmse
            );
        }
        PredictorCommand::Eval(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let model = read_model(&mut run, &a.model)?;
            let log = read_log(&mut run, &a.log)?;
            let series = PredictorSeries::from_log(&log, model.target)?;
            let (report, mode) = if a.free_running {
                let roll = sysid::rollout_log(&model, &log, true)?;
                (
                    sysid::EvalReport::from_series(series.dt, series.targets.clone(), roll.velocity)?,
                    "free_running".to_string(),
                )
            } else if let Some(input) = a.ablate {
                let mut p = RecurrentPredictor::ablating(&model, input.index());
                (
                    sysid::evaluate_series(&mut p, &series)?,
                    format!("ablate_{input:?}").to_lowercase(),
                )
            } else {
                (
                    sysid::evaluate_series(&mut RecurrentPredictor::new(&model), &series)?,
                    "teacher_forced".into(),
                )
            };
            write_eval(&mut run, "eval", &report, serde_json::json!({"mode": mode}))?;
            run.finish()?;
            println!(
                "{mode}: max |error| {:.4} rad/s, rmse {:.4} rad/s",
                report.max_abs_error, report.rmse
            );
        }
        PredictorCommand::Gradcheck(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let seed = a.common.seed.unwrap_or(0);
            run.set_seed(seed);
            let model = match &a.model {
                Some(p) => read_model(&mut run, p)?,
                None => RecurrentModel::init_random(16, seed),
            };
            let log = read_log(&mut run, &a.log)?;
            let series = PredictorSeries::from_log(&log, model.target)?;
            if a.start + a.len > series.len() {
                return Err(CliError::Usage(format!(
                    "window {}..{} exceeds the {} usable steps",
                    a.start,
                    a.start + a.len,
                    series.len()
                )));
            }
            let window = PredictorSeries {
                dt: series.dt,
                inputs: series.inputs[a.start..a.start + a.len].to_vec(),
                targets: series.targets[a.start..a.start + a.len].to_vec(),
            };
            let err = sysid::gradient_check_recurrent(&model, &window, a.epsilon)?;
            let pass = err <= a.tolerance;
            run.write_json(
                "gradcheck.json",
                &serde_json::json!({"max_relative_error": err, "epsilon": a.epsilon, "tolerance": a.tolerance, "pass": pass}),
            )?;
            run.finish()?;
            println!("max relative error {err:.3e} (tolerance {:.0e})", a.tolerance);
            if !pass {
                return Err(CliError::Failed(format!("gradient check failed: {err:.3e}")));
            }
        }
    }
    Ok(())
}
