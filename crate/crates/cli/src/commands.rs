use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mvpose_core::diffcore::{write_curve_csv, Checkpoint, CurvePoint};
use mvpose_core::lifter::{train_lifter as fit_lifter, LifterArch, LifterError, LifterModel};
use mvpose_core::matcher::{train_matcher as fit_matcher, MatcherArch, MatcherError, MatcherModel, DEFAULT_THRESHOLD};
use mvpose_core::metrics::{evaluate, timing_report, FrameTiming, MetricsError, TimingReport};
use mvpose_core::pipeline::{
    frame_eval, predict_frame, read_predictions, write_predictions, Estimator, FramePrediction, PipelineError,
};
use mvpose_core::scene_forge::{
    generate_rig, generate_scene, generate_track, load_detections, save_detections, FrameSample, PersonTrack,
};
use mvpose_core::Rig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{require_path, RunConfig};
use crate::manifest::Manifest;
use crate::plot::{colour, frame_svg, Skeleton};
use crate::{CliError, EvalArgs, InferArgs, PlotArgs, SynthArgs, TrainArgs};

fn out_dir(config: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&config.out).map_err(CliError::io(format!("creating `{}`", config.out.display())))?;
    Ok(&config.out)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(format!("writing `{}`", path.display())))
}

fn calibration_path(config: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let path = flag.clone().or_else(|| config.calibration.clone()).ok_or_else(|| {
        CliError::Config("calibration: no calibration file given (set `calibration` or pass --calibration)".into())
    })?;
    require_path("calibration", &path)?;
    Ok(path)
}

fn load_rig(path: &Path) -> Result<Rig, CliError> {
    Rig::load(path).map_err(|e| CliError::Config(format!("calibration `{}`: {e}", path.display())))
}

fn load_frames(path: &Path, field: &str) -> Result<Vec<FrameSample>, CliError> {
    require_path(field, path)?;
    load_detections(path).map_err(|e| CliError::Config(format!("{field} `{}`: {e}", path.display())))
}

/// Track files named directly or found (`*.jsonl`, sorted) in directories.
fn track_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(CliError::io(format!("listing `{}`", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            require_path("tracks", p)?;
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Config("tracks: no track files given (set `tracks` or pass --tracks)".into()));
    }
    Ok(files)
}

fn load_tracks(files: &[PathBuf]) -> Result<Vec<PersonTrack>, CliError> {
    files
        .iter()
        .map(|f| {
            let frames = load_frames(f, "tracks")?;
            PersonTrack::from_frames(frames).map_err(|e| CliError::Config(format!("tracks `{}`: {e}", f.display())))
        })
        .collect()
}

fn num_keypoints(tracks: &[PersonTrack]) -> Result<usize, CliError> {
    tracks
        .iter()
        .flat_map(|t| t.frames())
        .find_map(FrameSample::num_keypoints)
        .ok_or_else(|| CliError::Config("tracks: no detections in any track".into()))
}

fn matcher_error(e: MatcherError) -> CliError {
    match e {
        MatcherError::NonFiniteLoss { .. } | MatcherError::Diff(_) => CliError::Numeric(e.to_string()),
        MatcherError::Checkpoint(_) => CliError::Artifact(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn lifter_error(e: LifterError) -> CliError {
    match e {
        LifterError::NonFiniteLoss { .. } | LifterError::Diff(_) => CliError::Numeric(e.to_string()),
        LifterError::Checkpoint(_) => CliError::Artifact(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Matcher(e) => matcher_error(e),
        PipelineError::Lifter(e) => lifter_error(e),
        PipelineError::Frame { .. } => CliError::Config(e.to_string()),
    }
}

fn metrics_error(e: MetricsError) -> CliError {
    CliError::Config(e.to_string())
}

fn save_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(format!("creating `{}`", path.display())))?;
    write_curve_csv(curve, BufWriter::new(file)).map_err(CliError::io(format!("writing `{}`", path.display())))
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    ckpt.save(path)
        .map_err(|e| CliError::Artifact(format!("saving `{}`: {e}", path.display())))
}

pub fn synth(config: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    if args.max_persons == 0 {
        return Err(CliError::Config("max-persons must be at least 1".into()));
    }
    let synth_error = |e: mvpose_core::scene_forge::SynthError| CliError::Config(format!("synth: {e}"));
    let rig = match &config.calibration {
        Some(path) => load_rig(path)?,
        None => generate_rig(&config.synth).map_err(synth_error)?,
    };
    let out = out_dir(config)?;
    let calib = out.join("calibration.json");
    rig.save(&calib).map_err(CliError::io(format!("writing `{}`", calib.display())))?;

    let tracks_dir = out.join("tracks");
    fs::create_dir_all(&tracks_dir).map_err(CliError::io(format!("creating `{}`", tracks_dir.display())))?;
    for i in 0..args.tracks {
        let (track, _) = generate_track(&config.synth, &rig, i as u32, args.frames).map_err(synth_error)?;
        let path = tracks_dir.join(format!("track_{i:03}.jsonl"));
        save_detections(track.frames(), &path).map_err(CliError::io(format!("writing `{}`", path.display())))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.synth.seed);
    rng.set_stream(7);
    let mut persons = 0;
    let mut frames = Vec::with_capacity(args.eval_frames);
    for f in 0..args.eval_frames {
        let n = rng.random_range(1..=args.max_persons);
        persons += n;
        frames.push(generate_scene(&config.synth, &rig, n, f as u64).map_err(synth_error)?);
    }
    let eval = out.join("eval.jsonl");
    save_detections(&frames, &eval).map_err(CliError::io(format!("writing `{}`", eval.display())))?;
    println!(
        "wrote {} cameras, {} tracks of {} frames and {} evaluation frames ({persons} persons) to {}",
        rig.len(),
        args.tracks,
        args.frames,
        args.eval_frames,
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ThresholdSidecar {
    threshold: f64,
}

/// `matcher.json` keeps its grouping threshold in `matcher.threshold.json`.
pub fn threshold_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("threshold.json")
}

struct TrainInputs {
    calibration: PathBuf,
    rig: Rig,
    files: Vec<PathBuf>,
    tracks: Vec<PersonTrack>,
    num_keypoints: usize,
}

fn train_inputs(config: &RunConfig, args: &TrainArgs) -> Result<TrainInputs, CliError> {
    let calibration = calibration_path(config, &args.calibration)?;
    let rig = load_rig(&calibration)?;
    let files = track_files(if args.tracks.is_empty() { &config.tracks } else { &args.tracks })?;
    let tracks = load_tracks(&files)?;
    let num_keypoints = num_keypoints(&tracks)?;
    Ok(TrainInputs {
        calibration,
        rig,
        files,
        tracks,
        num_keypoints,
    })
}

fn manifest_for(command: &str, config: &RunConfig, seed: u64, inputs: &TrainInputs) -> Result<Manifest, CliError> {
    let mut m = Manifest::new(command, config, seed);
    m.add_input(&inputs.calibration)?;
    for f in &inputs.files {
        m.add_input(f)?;
    }
    Ok(m)
}

pub fn train_matcher(config: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let inputs = train_inputs(config, args)?;
    let arch = MatcherArch::new(&inputs.rig, inputs.num_keypoints);
    let trained = fit_matcher(&inputs.tracks, &inputs.rig, arch, &config.matcher).map_err(matcher_error)?;
    for w in &trained.warnings {
        eprintln!("warning: {w}");
    }
    let out = out_dir(config)?;
    let ckpt = out.join("matcher.json");
    save_checkpoint(&ckpt, &trained.model.checkpoint())?;
    let sidecar = threshold_sidecar(&ckpt);
    let text = serde_json::to_string_pretty(&ThresholdSidecar {
        threshold: config.matcher.threshold,
    })
    .expect("sidecar serializes");
    write_text(&sidecar, &(text + "\n"))?;
    let curve = out.join("matcher_curve.csv");
    save_curve(&curve, &trained.curve)?;

    let mut manifest = manifest_for("train-matcher", config, config.matcher.seed, &inputs)?;
    for p in [&ckpt, &sidecar, &curve] {
        manifest.add_output(p)?;
    }
    manifest.save(&out.join("matcher_manifest.json"))?;
    println!(
        "matcher: {} steps, best validation edge accuracy {:.4}, checkpoint {}",
        trained.steps,
        trained.best_val_accuracy,
        ckpt.display()
    );
    Ok(())
}

pub fn train_lifter(config: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let inputs = train_inputs(config, args)?;
    let arch = LifterArch::new(&inputs.rig, inputs.num_keypoints, config.profile.lifter_hidden());
    let trained = fit_lifter(&inputs.tracks, &inputs.rig, arch, &config.lifter).map_err(lifter_error)?;
    let out = out_dir(config)?;
    let ckpt = out.join("lifter.json");
    save_checkpoint(&ckpt, &trained.model.checkpoint())?;
    let curve = out.join("lifter_curve.csv");
    save_curve(&curve, &trained.curve)?;

    let mut manifest = manifest_for("train-lifter", config, config.lifter.seed, &inputs)?;
    manifest.add_output(&ckpt)?;
    manifest.add_output(&curve)?;
    manifest.save(&out.join("lifter_manifest.json"))?;
    println!(
        "lifter: {} steps, validation loss {:.4e} -> {:.4e}, checkpoint {}",
        trained.steps,
        trained.initial_val_loss,
        trained.best_val_loss,
        ckpt.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint, CliError> {
    require_path(what, path)?;
    Checkpoint::load(path).map_err(|e| CliError::Artifact(format!("{what} `{}`: {e}", path.display())))
}

fn artifact(what: &str) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::Artifact(format!("{what}: {e}"))
}

pub fn infer(config: &RunConfig, args: &InferArgs) -> Result<(), CliError> {
    let rig = load_rig(&calibration_path(config, &args.calibration)?)?;
    let frames = load_frames(&args.detections, "detections")?;
    let matcher = MatcherModel::from_checkpoint(&load_checkpoint(&args.matcher, "matcher")?)
        .map_err(|e| artifact("matcher")(e.to_string()))?;
    matcher.arch().check_rig(&rig).map_err(|e| artifact("matcher")(e.to_string()))?;
    let threshold = match args.threshold {
        Some(t) => t,
        None => {
            let sidecar = threshold_sidecar(&args.matcher);
            if sidecar.exists() {
                let text = fs::read_to_string(&sidecar).map_err(CliError::io(format!("reading `{}`", sidecar.display())))?;
                let s: ThresholdSidecar = serde_json::from_str(&text)
                    .map_err(|e| CliError::Artifact(format!("`{}`: {e}", sidecar.display())))?;
                s.threshold
            } else {
                DEFAULT_THRESHOLD
            }
        }
    };
    let lifter = match (&args.lifter, args.baseline) {
        (_, true) => None,
        (Some(path), false) => {
            let model = LifterModel::from_checkpoint(&load_checkpoint(path, "lifter")?)
                .map_err(|e| artifact("lifter")(e.to_string()))?;
            model.arch().check_rig(&rig).map_err(|e| artifact("lifter")(e.to_string()))?;
            Some(model)
        }
        (None, false) => return Err(CliError::Config("infer needs --lifter unless --baseline is given".into())),
    };
    let nk = matcher.arch().num_keypoints;
    if let Some(l) = &lifter {
        if l.num_keypoints() != nk {
            return Err(CliError::Artifact(format!(
                "lifter predicts {} joints, matcher expects {nk}",
                l.num_keypoints()
            )));
        }
    }
    if let Some((f, n)) = frames.iter().find_map(|f| f.num_keypoints().filter(|&n| n != nk).map(|n| (f.frame_id, n))) {
        return Err(CliError::Artifact(format!("frame {f} has {n} keypoints per skeleton, models expect {nk}")));
    }
    let estimator = lifter.as_ref().map_or(Estimator::Triangulation, Estimator::Lifter);

    let mut predictions = Vec::with_capacity(frames.len());
    let mut timings: Vec<FrameTiming> = Vec::with_capacity(frames.len());
    for frame in &frames {
        let (p, t) = predict_frame(frame, &rig, &matcher, threshold, estimator).map_err(pipeline_error)?;
        predictions.push(p);
        timings.push(t);
    }
    let out = out_dir(config)?;
    let pred_path = out.join("predictions.jsonl");
    let file = File::create(&pred_path).map_err(CliError::io(format!("creating `{}`", pred_path.display())))?;
    write_predictions(&predictions, BufWriter::new(file)).map_err(CliError::io(format!("writing `{}`", pred_path.display())))?;

    let warmup = if timings.len() > config.eval.warmup_frames { config.eval.warmup_frames } else { 0 };
    if let Some(report) = timing_report(&timings, warmup) {
        let text = serde_json::to_string_pretty(&report).expect("timing serializes");
        write_text(&out.join("timing.json"), &(text + "\n"))?;
        log::info!(
            "t_pp {:.3} ms, t_3Dg {:.3} ms, t_3Di {:.3} ms over {} frames",
            report.t_pp,
            report.t_3dg,
            report.t_3di,
            report.frames
        );
    }
    let persons: usize = predictions.iter().map(|p| p.persons.len()).sum();
    println!("{} frames, {persons} persons -> {}", predictions.len(), pred_path.display());
    Ok(())
}

pub fn eval(config: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    require_path("pred", &args.pred)?;
    let file = File::open(&args.pred).map_err(CliError::io(format!("opening `{}`", args.pred.display())))?;
    let predictions =
        read_predictions(BufReader::new(file)).map_err(|e| CliError::Config(format!("pred `{}`: {e}", args.pred.display())))?;
    let truth = load_frames(&args.gt, "gt")?;
    let by_id: std::collections::BTreeMap<u64, &FramePrediction> = predictions.iter().map(|p| (p.frame_id, p)).collect();
    let mut frames = Vec::with_capacity(truth.len());
    for sample in &truth {
        let empty = FramePrediction {
            frame_id: sample.frame_id,
            persons: Vec::new(),
        };
        let pred = by_id.get(&sample.frame_id).copied().unwrap_or(&empty);
        if let Some(nk) = sample.num_keypoints() {
            if let Some(p) = pred.persons.iter().find(|p| p.joints.len() != nk) {
                return Err(CliError::Config(format!(
                    "frame {}: prediction has {} joints, ground truth has {nk}",
                    sample.frame_id,
                    p.joints.len()
                )));
            }
        }
        frames.push(frame_eval(pred, sample));
    }
    let missing = predictions.len().saturating_sub(by_id.len());
    if missing > 0 {
        log::warn!("{missing} duplicate prediction frames ignored");
    }
    let mut report = evaluate(&frames, &config.eval).map_err(metrics_error)?;
    if let Some(path) = &args.timing {
        require_path("timing", path)?;
        let text = fs::read_to_string(path).map_err(CliError::io(format!("reading `{}`", path.display())))?;
        let timing: TimingReport =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("timing `{}`: {e}", path.display())))?;
        report.timing = Some(timing);
    }
    let out = out_dir(config)?;
    let csv = report.to_csv();
    write_text(&out.join("report.csv"), &csv)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    print!("{csv}");
    Ok(())
}

pub fn plot(config: &RunConfig, args: &PlotArgs) -> Result<(), CliError> {
    // (frame id, skeletons) per drawn frame.
    let frames: Vec<(u64, Vec<Vec<Option<[f64; 3]>>>)> = if let Some(path) = &args.pred {
        require_path("pred", path)?;
        let file = File::open(path).map_err(CliError::io(format!("opening `{}`", path.display())))?;
        read_predictions(BufReader::new(file))
            .map_err(|e| CliError::Config(format!("pred `{}`: {e}", path.display())))?
            .into_iter()
            .take(args.frames)
            .map(|p| (p.frame_id, p.persons.into_iter().map(|q| q.joints).collect()))
            .collect()
    } else {
        let path = args.dataset.as_ref().expect("clap requires --pred or --dataset");
        load_frames(path, "dataset")?
            .into_iter()
            .take(args.frames)
            .map(|f| {
                let poses = f
                    .ground_truth
                    .iter()
                    .flatten()
                    .map(|g| g.pose.joints().iter().map(|p| Some([p.x, p.y, p.z])).collect())
                    .collect();
                (f.frame_id, poses)
            })
            .collect()
    };
    let dir = out_dir(config)?.join("plots");
    fs::create_dir_all(&dir).map_err(CliError::io(format!("creating `{}`", dir.display())))?;
    let mut csv = String::from("frame_id,person,joint,x,y,z\n");
    for (frame_id, poses) in &frames {
        let skeletons: Vec<Skeleton> = poses
            .iter()
            .enumerate()
            .map(|(i, joints)| Skeleton {
                joints: joints.clone(),
                colour: colour(i),
            })
            .collect();
        write_text(&dir.join(format!("frame_{frame_id:06}.svg")), &frame_svg(&format!("frame {frame_id}"), &skeletons))?;
        for (i, joints) in poses.iter().enumerate() {
            for (k, j) in joints.iter().enumerate() {
                match j {
                    Some([x, y, z]) => csv.push_str(&format!("{frame_id},{i},{k},{x},{y},{z}\n")),
                    None => csv.push_str(&format!("{frame_id},{i},{k},,,\n")),
                }
            }
        }
    }
    let mut f = File::create(dir.join("joints.csv")).map_err(CliError::io("creating joints.csv"))?;
    f.write_all(csv.as_bytes()).map_err(CliError::io("writing joints.csv"))?;
    println!("{} frames drawn to {}", frames.len(), dir.display());
    Ok(())
}
