use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use wastebot::control::{
    self, Controller, ControllerTrainConfig, EpisodeConfig, PidGains, PolicyModel, StateSource, Strategy,
};
use wastebot::cube::{SpectralCube, CHANNEL_COUNT};
use wastebot::matclass::{self, MaterialClass, MlpConfig, Signature, SyntheticSceneSpec};
use wastebot::plant::{JointPlantParams, Plant, DEFAULT_DT};

use crate::dynamics::read_model;
use crate::manifest::Run;
use crate::{CliResult, Common};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum State {
    Direct,
    Markers,
}

impl From<State> for StateSource {
    fn from(s: State) -> Self {
        match s {
            State::Direct => StateSource::Direct,
            State::Markers => StateSource::Markers,
        }
    }
}

#[derive(Debug, Args)]
pub struct PlantFile {
    /// Plant parameter JSON; the canonical plant otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
}

impl PlantFile {
    fn load(&self, run: &mut Run) -> CliResult<JointPlantParams> {
        match &self.params {
            Some(p) => {
                run.input(p)?;
                Ok(JointPlantParams::from_json_file(p)?)
            }
            None => Ok(JointPlantParams::canonical()),
        }
    }
}

fn read_policy(run: &mut Run, path: &std::path::Path) -> CliResult<PolicyModel> {
    run.input(path)?;
    let policy: PolicyModel = serde_json::from_slice(&std::fs::read(path)?)?;
    policy.validate()?;
    Ok(policy)
}

#[derive(Debug, Subcommand)]
pub enum ControllerCommand {
    /// Optimize a policy through a frozen predictor; the plant is never run.
    Train(ControllerTrainArgs),
    /// Track one trapezoidal move on the plant.
    Run(ControllerRunArgs),
}

#[derive(Debug, Args)]
pub struct ControllerTrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    plant: PlantFile,
    #[arg(long)]
    predictor: PathBuf,
}

#[derive(Debug, Args)]
pub struct ControllerRunArgs {
    /// `--config` overlays the PID gains.
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    plant: PlantFile,
    /// Learned policy; PID otherwise.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = State::Direct)]
    state: State,
    #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
    from: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    to: f64,
    #[arg(long, default_value_t = 0.5)]
    vmax: f64,
    #[arg(long, default_value_t = 0.5)]
    amax: f64,
}

pub fn controller(command: ControllerCommand, argv: &[String]) -> CliResult<()> {
    match command {
        ControllerCommand::Train(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let params = a.plant.load(&mut run)?;
            let mut cfg = a.common.config(ControllerTrainConfig::for_plant(&params))?;
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            run.set_seed(cfg.seed);
            let predictor = read_model(&mut run, &a.predictor)?;
            let trained = control::train_controller(&predictor, &params, &cfg)?;
            run.write_json("policy.json", &trained.policy)?;
            run.write_json(
                "training.json",
                &serde_json::json!({"config": cfg, "epoch_losses": trained.epoch_losses}),
            )?;
            run.finish()?;
            println!(
                "final rollout loss {:.3e}",
                trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        ControllerCommand::Run(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let params = a.plant.load(&mut run)?;
            let gains = a.common.config(PidGains::default())?;
            let policy = a.policy.as_ref().map(|p| read_policy(&mut run, p)).transpose()?;
            let controller = match &policy {
                Some(p) => Controller::Policy(p),
                None => Controller::Pid(gains),
            };
            let seed = a.common.seed.unwrap_or(0);
            run.set_seed(seed);
            let trajectory = control::gen_trajectory(a.from, a.to, a.vmax, a.amax, DEFAULT_DT)?;
            let mut plant = Plant::with_state(params.clone(), params.rest_state_at_sensor(a.from)?, seed)?;
            let log = control::follow(
                &mut plant,
                &trajectory,
                &controller,
                a.state.into(),
                &Default::default(),
                control::DEFAULT_ALPHA,
            )?;
            let mut csv = String::from("t,desired,estimated,actual,command\n");
            for s in &log.steps {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.t, s.desired, s.estimated, s.actual, s.command
                ));
            }
            run.write("tracking.csv", csv.as_bytes())?;
            run.write_json(
                "tracking.json",
                &serde_json::json!({
                    "controller": controller.name(),
                    "state_source": StateSource::from(a.state),
                    "duration": trajectory.duration(),
                    "rmse": log.rmse,
                }),
            )?;
            run.finish()?;
            println!(
                "{} tracking rmse {:.4} rad over {:.2} s",
                controller.name(),
                log.rmse,
                trajectory.duration()
            );
        }
    }
    Ok(())
}

/// Everything `pipeline run` needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Side of the square scenes, px.
    pub scene_size: usize,
    /// Annotated scenes the classifier is trained on; the scene to sort is
    /// never among them.
    pub training_scenes: usize,
    pub classifier: MlpConfig,
    /// Pixels closer than this (Euclidean, over all channels) to the empty
    /// conveyor's signature are masked out before classification.
    pub background_distance: f64,
    pub strategy: Strategy,
    pub pid: PidGains,
    pub state_source: StateSource,
    pub plant: JointPlantParams,
    pub episode: EpisodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        use MaterialClass::*;
        let plant = JointPlantParams::canonical();
        Self {
            scene_size: 128,
            training_scenes: 3,
            classifier: MlpConfig::default(),
            background_distance: 0.35,
            strategy: Strategy {
                priority: vec![Wood, Metal, Plastic, PaperCardboard, Textile, Foam, MineralStone],
                min_area: 30,
                min_confidence: 0.5,
            },
            pid: PidGains::default(),
            state_source: StateSource::Direct,
            episode: EpisodeConfig::for_plant(&plant),
            plant,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Synthesize a scene, classify it, plan the picks and execute them.
    Run(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Drive the joint with a learned policy instead of PID.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Overrides the configured state source.
    #[arg(long, value_enum)]
    state: Option<State>,
}

/// Seed of the `k`-th training scene, offset far away from the small seeds
/// used for sorting scenes.
fn training_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(1_000_003 + k as u64)
}

/// Marks pixels that look like the empty conveyor as invalid.
fn mask_background(cube: &SpectralCube, background: &Signature, max_distance: f64) -> CliResult<SpectralCube> {
    let (w, h) = (cube.width(), cube.height());
    let mask = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let d2: f64 = cube
                .pixel(x, y)
                .iter()
                .zip(background)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            cube.is_valid(x, y) && d2.sqrt() >= max_distance
        })
        .collect();
    let planes = (0..CHANNEL_COUNT).map(|c| cube.plane(c).to_vec()).collect();
    Ok(SpectralCube::new(
        w,
        h,
        planes,
        cube.channel_meta().to_vec(),
        mask,
        cube.is_normalized(),
    )?)
}

pub fn pipeline(command: PipelineCommand, argv: &[String]) -> CliResult<()> {
    let PipelineCommand::Run(a) = command;
    let mut run = Run::start(argv, &a.common)?;
    let mut cfg = a.common.config(PipelineConfig::default())?;
    let seed = a.common.seed.unwrap_or(0);
    run.set_seed(seed);
    cfg.classifier.seed = seed;
    if let Some(s) = a.state {
        cfg.state_source = s.into();
    }
    cfg.strategy.validate()?;
    let policy = a.policy.as_ref().map(|p| read_policy(&mut run, p)).transpose()?;

    let scene_spec = |s: u64| {
        SyntheticSceneSpec::grid(
            s,
            cfg.scene_size,
            cfg.scene_size,
            matclass::canonical_signatures(),
            0.05,
            (0.5, 1.0),
        )
    };
    let mut samples = Vec::new();
    for k in 0..cfg.training_scenes {
        let spec = scene_spec(training_seed(seed, k));
        let (cube, _) = matclass::gen_synthetic_scene(&spec)?;
        samples.extend(matclass::extract_samples(&cube, &spec.label_rects(1))?);
    }
    let classifier = matclass::train_mlp(&samples, &cfg.classifier)?.model;

    let spec = scene_spec(seed);
    let (scene, truth) = matclass::gen_synthetic_scene(&spec)?;
    let scene = mask_background(&scene, &spec.background, cfg.background_distance)?;
    let (labels, confidence) = matclass::classify_cube(&classifier, &scene)?;
    let pairs: Vec<_> = truth
        .labels
        .iter()
        .zip(&labels.labels)
        .filter(|(t, p)| t.index().is_some() && p.index().is_some())
        .map(|(t, p)| (*t, *p))
        .collect();
    let scene_metrics = matclass::metrics_from_predictions(&pairs)?;

    let reach = control::reach_range(&cfg.plant);
    let picks = control::plan_pick_sequence(&labels, &confidence, &cfg.strategy, reach)?;
    let controller = match &policy {
        Some(p) => Controller::Policy(p),
        None => Controller::Pid(cfg.pid),
    };
    let mut plant = Plant::new(cfg.plant.clone(), seed)?;
    let episode = control::run_episode(&mut plant, &picks, &controller, cfg.state_source, &cfg.episode)?;

    let mut png = Vec::new();
    matclass::write_label_png(&labels, &mut png)?;
    run.write("labels.png", &png)?;
    run.write_json("classification.json", &scene_metrics)?;
    run.write_json("picks.json", &picks)?;
    run.write_json("report.json", &episode.report)?;
    let mut csv = Vec::new();
    episode.write_steps_csv(&mut csv)?;
    run.write("steps.csv", &csv)?;
    run.finish()?;

    let r = &episode.report;
    println!("scene classification {}", scene_metrics.headline());
    println!(
        "{} picks: {} completed, {} failed, rmse {:.4} rad, {:.1} s",
        r.picks.len(),
        r.completed,
        r.failed,
        r.rmse,
        r.total_time
    );
    Ok(())
}
