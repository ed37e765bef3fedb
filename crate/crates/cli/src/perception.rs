use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;
use wastebot::cube::{self, Camera, RawCapture, SpectralCube, CHANNEL_COUNT};
use wastebot::image::{self, Image};
use wastebot::matclass::{self, LabelRect, MlpConfig, MlpModel, PixelSample, SyntheticSceneSpec};
use wastebot::register::synth::synthetic_vis_triple;
use wastebot::register::{self, Homography, RegistrationParams, VisFrames};

use crate::manifest::Run;
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[command(flatten)]
    common: Common,
}

pub fn bands(args: &BandsArgs, argv: &[String]) -> CliResult<()> {
    let table = cube::canonical_band_table();
    let text = cube::format_band_table(&table);
    print!("{text}");
    if args.common.out.is_some() {
        let mut run = Run::start(argv, &args.common)?;
        run.write("bands.tsv", text.as_bytes())?;
        run.write_json("bands.json", &table)?;
        run.finish()?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthSceneArgs {
    #[command(flatten)]
    common: Common,
    /// Side length in pixels of the default grid scene.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Classes differ only in the SWIR channels.
    #[arg(long)]
    swir_only: bool,
    /// Inward margin of the emitted annotation rectangles.
    #[arg(long, default_value_t = 1)]
    margin: usize,
}

pub fn synth_scene(args: &SynthSceneArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::start(argv, &args.common)?;
    let seed = args.common.seed.unwrap_or(0);
    let signatures = if args.swir_only {
        matclass::swir_only_signatures()
    } else {
        matclass::canonical_signatures()
    };
    let default = SyntheticSceneSpec::grid(seed, args.size, args.size, signatures, 0.05, (0.5, 1.0));
    let mut spec = args.common.config(default)?;
    if let Some(s) = args.common.seed {
        spec.seed = s;
    }
    run.set_seed(spec.seed);
    let (scene, truth) = matclass::gen_synthetic_scene(&spec)?;
    let mut bytes = Vec::new();
    scene.write_msc1(&mut bytes)?;
    run.write("scene.msc1", &bytes)?;
    let mut png = Vec::new();
    matclass::write_label_png(&truth, &mut png)?;
    run.write("truth.png", &png)?;
    run.write_json("labels.json", &spec.label_rects(args.margin))?;
    run.write_json("scene.json", &spec)?;
    run.write_json("legend.json", &matclass::palette_legend())?;
    run.finish()?;
    println!(
        "scene {}x{} with {} patches",
        spec.width,
        spec.height,
        spec.layout.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of raw captures (PNG plus JSON sidecar each). The unfiltered
    /// captures drive registration and all captures are warped into a cube.
    #[arg(long, conflicts_with_all = ["uv", "visnir", "swir"])]
    captures: Option<PathBuf>,
    /// Unfiltered frames of the three cameras, given together.
    #[arg(long, requires_all = ["visnir", "swir"])]
    uv: Option<PathBuf>,
    #[arg(long, requires_all = ["uv", "swir"])]
    visnir: Option<PathBuf>,
    #[arg(long, requires_all = ["uv", "visnir"])]
    swir: Option<PathBuf>,
    /// Without inputs a synthetic triple of this size is rendered from the seed.
    #[arg(long, default_value_t = 512)]
    size: usize,
}

#[derive(Serialize)]
struct SyntheticTruth {
    visnir_to_uv: [f64; 9],
    swir_to_uv: [f64; 9],
    /// Largest corner displacement between recovered and true maps, px.
    corner_error_px: Vec<(Camera, f64)>,
}

/// Largest displacement of the image corners between two homographies.
pub fn corner_error(est: &Homography, truth: &Homography, width: usize, height: usize) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
        .iter()
        .map(|&p| {
            let (a, b) = (est.apply(p), truth.apply(p));
            (a.0 - b.0).hypot(a.1 - b.1)
        })
        .fold(0.0, f64::max)
}

fn read_image(run: &mut Run, path: &Path) -> CliResult<Image> {
    run.input(path)?;
    Ok(image::read_png(BufReader::new(File::open(path)?))?)
}

fn load_captures(run: &mut Run, dir: &Path) -> CliResult<Vec<RawCapture>> {
    let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    pngs.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    pngs.sort();
    pngs.iter()
        .map(|p| {
            run.input(p)?;
            run.input(&p.with_extension("json"))?;
            Ok(cube::load_raw_capture(p)?)
        })
        .collect()
}

fn unfiltered(captures: &[RawCapture], camera: Camera) -> CliResult<Image> {
    captures
        .iter()
        .find(|c| c.band.filter_index == camera.unfiltered_index())
        .map(|c| c.image.clone())
        .ok_or_else(|| {
            CliError::Core(wastebot::Error::Format(format!(
                "no unfiltered {} capture",
                camera.name()
            )))
        })
}

pub fn register(args: &RegisterArgs, argv: &[String]) -> CliResult<()> {
    let mut run = Run::start(argv, &args.common)?;
    let mut params = args.common.config(RegistrationParams::default())?;
    if let Some(s) = args.common.seed {
        params.ransac.seed = s;
    }
    run.set_seed(params.ransac.seed);
    let mut captures = Vec::new();
    let mut truth = None;
    let frames = if let Some(dir) = &args.captures {
        captures = load_captures(&mut run, dir)?;
        VisFrames {
            series_id: dir.display().to_string(),
            uv: unfiltered(&captures, Camera::Uv)?,
            visnir: unfiltered(&captures, Camera::VisNir)?,
            swir: unfiltered(&captures, Camera::Swir)?,
        }
    } else if let (Some(uv), Some(visnir), Some(swir)) = (&args.uv, &args.visnir, &args.swir) {
        VisFrames {
            series_id: uv.display().to_string(),
            uv: read_image(&mut run, uv)?,
            visnir: read_image(&mut run, visnir)?,
            swir: read_image(&mut run, swir)?,
        }
    } else {
        let seed = args.common.seed.unwrap_or(0);
        let t = synthetic_vis_triple(seed, args.size, 30.0, 10f64.to_radians(), 1.2);
        truth = Some((t.visnir_to_uv, t.swir_to_uv));
        t.frames
    };

    let result = register::register_series(&frames, &params)?;
    run.write_json("registration.json", &result.to_json())?;
    let (w, h) = (frames.uv.width(), frames.uv.height());
    if let Some((visnir_to_uv, swir_to_uv)) = truth {
        let corner_error_px = [(Camera::VisNir, visnir_to_uv), (Camera::Swir, swir_to_uv)]
            .iter()
            .filter_map(|(cam, t)| result.homography(*cam).ok().map(|e| (*cam, corner_error(e, t, w, h))))
            .collect();
        run.write_json(
            "truth.json",
            &SyntheticTruth {
                visnir_to_uv: visnir_to_uv.h,
                swir_to_uv: swir_to_uv.h,
                corner_error_px,
            },
        )?;
    }
    let failed: Vec<String> = result
        .cameras
        .iter()
        .filter_map(|(cam, reg)| match reg {
            register::CameraRegistration::Failed { reason } => Some(format!("{}: {reason}", cam.name())),
            _ => None,
        })
        .collect();
    if failed.is_empty() && !captures.is_empty() {
        let cube = register::warp_series_to_cube(&captures, &result, w, h)?;
        let mut bytes = Vec::new();
        cube.write_msc1(&mut bytes)?;
        run.write("cube.msc1", &bytes)?;
    }
    run.finish()?;
    for (cam, reg) in &result.cameras {
        match reg.homography() {
            Some(hm) => println!(
                "{}: {} inliers, rms {:.3} px",
                cam.name(),
                hm.inlier_count,
                hm.rms_reproj_px
            ),
            None => println!("{}: failed", cam.name()),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Core(wastebot::Error::RegistrationFailed(failed.join("; "))))
    }
}

#[derive(Debug, Subcommand)]
pub enum ClassifyCommand {
    /// Train on annotated cubes; 20 % of every class is held out and scored.
    Train(TrainArgs),
    /// Score a model against annotated cubes.
    Eval(EvalArgs),
    /// Label every pixel of a cube.
    Infer(InferArgs),
    /// Rank band subsets by held-out macro-f1.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Annotated {
    /// MSC1 cube; repeat to combine several scenes.
    #[arg(long = "scene", required = true)]
    scenes: Vec<PathBuf>,
    /// Label rectangles for the scene at the same position.
    #[arg(long = "labels", required = true)]
    labels: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Annotated,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: Annotated,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Annotated,
    /// JSON list of channel-index lists; defaults to the camera groupings.
    #[arg(long)]
    subsets: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(run: &mut Run, path: &Path) -> CliResult<T> {
    run.input(path)?;
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub(crate) fn read_cube(run: &mut Run, path: &Path) -> CliResult<SpectralCube> {
    run.input(path)?;
    Ok(SpectralCube::read_msc1(BufReader::new(File::open(path)?))?)
}

fn samples(run: &mut Run, data: &Annotated) -> CliResult<Vec<PixelSample>> {
    if data.scenes.len() != data.labels.len() {
        return Err(CliError::Usage("give one --labels file per --scene".into()));
    }
    let mut out = Vec::new();
    for (scene, labels) in data.scenes.iter().zip(&data.labels) {
        let cube = read_cube(run, scene)?;
        let rects: Vec<LabelRect> = read_json(run, labels)?;
        out.extend(matclass::extract_samples(&cube, &rects)?);
    }
    Ok(out)
}

fn mlp_config(common: &Common) -> CliResult<MlpConfig> {
    let mut cfg = common.config(MlpConfig::default())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_metrics(m: &matclass::Metrics) {
    println!("{}", m.headline());
    for c in &m.per_class {
        println!(
            "  {:<15} precision {:.3} recall {:.3} f1 {:.3} support {}",
            c.class.name(),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
}

/// Default ablation subsets: everything, each camera, the visible RGB
/// channels and the two infrared cameras together.
pub fn default_subsets() -> Vec<Vec<usize>> {
    let mut nir_swir = cube::camera_channels(Camera::VisNir);
    nir_swir.retain(|c| !cube::visible_channels().contains(c));
    nir_swir.extend(cube::camera_channels(Camera::Swir));
    vec![
        (0..CHANNEL_COUNT).collect(),
        cube::camera_channels(Camera::Uv),
        cube::camera_channels(Camera::VisNir),
        cube::camera_channels(Camera::Swir),
        cube::visible_channels(),
        nir_swir,
    ]
}

pub fn classify(command: ClassifyCommand, argv: &[String]) -> CliResult<()> {
    match command {
        ClassifyCommand::Train(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let cfg = mlp_config(&a.common)?;
            run.set_seed(cfg.seed);
            let all = samples(&mut run, &a.data)?;
            let (train, test) = matclass::stratified_split(&all, matclass::TRAIN_FRACTION, cfg.seed)?;
            let trained = matclass::train_mlp(&train, &cfg)?;
            let metrics = matclass::evaluate(&trained.model, &test)?;
            run.write_json("model.json", &trained.model)?;
            run.write_json(
                "training.json",
                &serde_json::json!({
                    "config": cfg,
                    "train_samples": train.len(),
                    "test_samples": test.len(),
                    "epoch_losses": trained.epoch_losses,
                }),
            )?;
            run.write_json("metrics.json", &metrics)?;
            run.finish()?;
            print_metrics(&metrics);
        }
        ClassifyCommand::Eval(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let model: MlpModel = read_json(&mut run, &a.model)?;
            model.validate()?;
            let all = samples(&mut run, &a.data)?;
            let metrics = matclass::evaluate(&model, &all)?;
            run.write_json("metrics.json", &metrics)?;
            run.finish()?;
            print_metrics(&metrics);
        }
        ClassifyCommand::Infer(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let model: MlpModel = read_json(&mut run, &a.model)?;
            model.validate()?;
            let cube = read_cube(&mut run, &a.scene)?;
            let (labels, confidence) = matclass::classify_cube(&model, &cube)?;
            let mut png = Vec::new();
            matclass::write_label_png(&labels, &mut png)?;
            run.write("labels.png", &png)?;
            png.clear();
            matclass::write_confidence_png(labels.width, labels.height, &confidence, &mut png)?;
            run.write("confidence.png", &png)?;
            run.write_json("legend.json", &matclass::palette_legend())?;
            run.write_json("histogram.json", &labels.histogram())?;
            run.finish()?;
            for (class, n) in labels.histogram() {
                println!("{:<15} {n}", class.name());
            }
        }
        ClassifyCommand::Ablate(a) => {
            let mut run = Run::start(argv, &a.common)?;
            let cfg = mlp_config(&a.common)?;
            run.set_seed(cfg.seed);
            let subsets = match &a.subsets {
                Some(p) => read_json(&mut run, p)?,
                None => default_subsets(),
            };
            let all = samples(&mut run, &a.data)?;
            let ranking = matclass::band_ablation(&all, &subsets, &cfg)?;
            run.write_json("ablation.json", &ranking)?;
            run.finish()?;
            for e in &ranking {
                println!("macro-f1 {:.3}  bands {:?}", e.macro_f1, e.subset);
            }
        }
    }
    Ok(())
}
