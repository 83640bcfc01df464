//! One function per task. Each returns the metrics recorded in `run.json`
//! and the artifact files it wrote under `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use arcp_core::attenet::{self, AtteNet};
use arcp_core::checkpoint::{self, ArcpConfig};
use arcp_core::data::{load_canonical, save_canonical, window_scene, ObservationBatch, Scene, TargetBatch};
use arcp_core::fusion::{self, Arcp, FusionVariant};
use arcp_core::gradcheck;
use arcp_core::iatcnn::{self, Model};
use arcp_core::image::{self, LabeledImage};
use arcp_core::labels::CrossingLabel;
use arcp_core::metrics;
use arcp_core::synth::{self, IntersectionConfig};
use arcp_core::{Error, Result};
use serde_json::{json, Value};

use crate::config::{model_window, RunConfig, SynthKind, Task};

pub struct Outcome {
    pub metrics: Value,
    pub artifacts: Vec<String>,
    /// False when the task ran but its check failed (gradcheck).
    pub passed: bool,
}

impl Outcome {
    fn ok(metrics: Value, artifacts: Vec<String>) -> Self {
        Outcome { metrics, artifacts, passed: true }
    }
}

type Windows = Vec<(ObservationBatch, TargetBatch)>;

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match cfg.task {
        Task::Synth => synth(cfg),
        Task::TrainMp => train_mp(cfg),
        Task::EvalMp => eval_mp(cfg),
        Task::TrainTl => train_tl(cfg),
        Task::EvalTl => eval_tl(cfg),
        Task::TrainArcp => train_arcp(cfg),
        Task::EvalArcp => eval_arcp(cfg),
        Task::Predict => predict(cfg),
        Task::Gradcheck => gradcheck(cfg),
    }
}

fn data_path(cfg: &RunConfig) -> &Path {
    cfg.paths.data.as_deref().expect("validated")
}

fn checkpoint_path(cfg: &RunConfig) -> &Path {
    cfg.paths.checkpoint.as_deref().expect("validated")
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let s = &cfg.synth;
    match s.kind {
        SynthKind::SocialForces => {
            let dir = out(cfg, "scenes");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut samples = 0;
            for i in 0..s.scenes {
                let n = 1 + i % s.max_agents;
                let scene = synth::gen_social_forces(n, s.steps, &s.social_forces, cfg.seed.wrapping_add(i as u64))?;
                samples += scene.sample_count();
                save_canonical(&scene, dir.join(format!("scene_{i:04}.csv")))?;
            }
            Ok(Outcome::ok(json!({ "scenes": s.scenes, "samples": samples }), vec!["scenes/".into()]))
        }
        SynthKind::Disc => {
            let d = &s.disc;
            let train = synth::disc_dataset(d.train, d.size, d.classes, d.noise, cfg.seed)?;
            let val = synth::disc_dataset(d.val, d.size, d.classes, d.noise, cfg.seed.wrapping_add(1))?;
            image::save_dataset(out(cfg, "train"), &train)?;
            image::save_dataset(out(cfg, "val"), &val)?;
            Ok(Outcome::ok(json!({ "train": train.len(), "val": val.len() }), vec!["train/".into(), "val/".into()]))
        }
        SynthKind::Intersection => {
            let train = synth::gen_intersection(&s.intersection, cfg.seed)?;
            let test_cfg = IntersectionConfig { n_scenes: s.test_scenes, ..s.intersection.clone() };
            let test = synth::gen_intersection(&test_cfg, cfg.seed.wrapping_add(1))?;
            synth::save_crossing_dataset(out(cfg, "train"), &train)?;
            synth::save_crossing_dataset(out(cfg, "test"), &test)?;
            let cross = |d: &[synth::CrossingSample]| {
                d.iter().filter(|x| x.label == CrossingLabel::Cross).count() as f64 / d.len().max(1) as f64
            };
            Ok(Outcome::ok(
                json!({
                    "train": train.len(),
                    "test": test.len(),
                    "train_cross_fraction": cross(&train),
                    "test_cross_fraction": cross(&test),
                }),
                vec!["train/".into(), "test/".into()],
            ))
        }
    }
}

/// A single CSV, or every `.csv` in a directory in name order.
fn load_scenes(path: &Path, frame_rate: f64) -> Result<Vec<Scene>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| Ok(load_canonical(f, frame_rate)?.scene)).collect()
}

/// All windows in scene order, split into leading training and trailing
/// test windows.
fn split_windows(cfg: &RunConfig) -> Result<(Windows, Windows)> {
    let mut all = Vec::new();
    for scene in load_scenes(data_path(cfg), cfg.frame_rate)? {
        all.extend(window_scene(&scene, &cfg.window)?);
    }
    if all.is_empty() {
        return Err(Error::EmptyDataset("trajectory windows"));
    }
    let n_test = (all.len() as f64 * cfg.test_fraction).round() as usize;
    let test = all.split_off(all.len() - n_test);
    Ok((all, test))
}

fn scores(model: &Model, windows: &Windows) -> Result<Value> {
    let m = iatcnn::evaluate(model, windows)?;
    let cv = fusion::evaluate_cv(windows)?;
    Ok(json!({ "model": m, "cv": cv, "windows": windows.len() }))
}

fn train_mp(cfg: &RunConfig) -> Result<Outcome> {
    let (train, test) = split_windows(cfg)?;
    let mut model = Model::build(cfg.trajectory.clone(), cfg.seed)?;
    let report = iatcnn::train_with(&mut model, &train, &cfg.train, |e, l| eprintln!("epoch {:>3}  loss {l:.5}", e + 1))?;
    checkpoint::save(out(cfg, "model.ckpt"), &model)?;
    let test_scores = if test.is_empty() { Value::Null } else { scores(&model, &test)? };
    Ok(Outcome::ok(
        json!({
            "variant": model.config.variant.name(),
            "parameters": model.parameter_count(),
            "train_windows": train.len(),
            "epoch_loss": report.epoch_loss,
            "test": test_scores,
        }),
        vec!["model.ckpt".into()],
    ))
}

fn eval_mp(cfg: &RunConfig) -> Result<Outcome> {
    let model: Model = checkpoint::load_expecting(checkpoint_path(cfg), &cfg.trajectory)?;
    let (train, test) = split_windows(cfg)?;
    let windows = if test.is_empty() { train } else { test };
    let m = iatcnn::evaluate(&model, &windows)?;
    let cv = fusion::evaluate_cv(&windows)?;
    let path = out(cfg, "metrics.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    metrics::write_trajectory_csv(&[(model.config.variant.name().to_string(), m), ("CV".to_string(), cv)], file)?;
    Ok(Outcome::ok(json!({ "model": m, "cv": cv, "windows": windows.len() }), vec!["metrics.csv".into()]))
}

fn load_images(path: &Path) -> Result<Vec<LabeledImage>> {
    if path.is_dir() {
        image::load_dataset(path.join("labels.csv"))
    } else {
        image::load_dataset(path)
    }
}

fn train_tl(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_images(data_path(cfg))?;
    let mut model = AtteNet::build(cfg.attenet.clone(), cfg.seed)?;
    let history = attenet::train_classifier(&mut model, &data, &cfg.classifier)?;
    for (e, (l, a)) in history.epoch_loss.iter().zip(&history.epoch_accuracy).enumerate() {
        eprintln!("epoch {:>3}  loss {l:.5}  accuracy {a:.3}", e + 1);
    }
    checkpoint::save(out(cfg, "attenet.ckpt"), &model)?;
    let val = match &cfg.paths.val_data {
        Some(p) => serde_json::to_value(attenet::eval_classifier(&model, &load_images(p)?)?)?,
        None => Value::Null,
    };
    Ok(Outcome::ok(
        json!({ "train_images": data.len(), "history": history, "validation": val }),
        vec!["attenet.ckpt".into()],
    ))
}

fn eval_tl(cfg: &RunConfig) -> Result<Outcome> {
    let model: AtteNet = checkpoint::load_expecting(checkpoint_path(cfg), &cfg.attenet)?;
    let report = attenet::eval_classifier(&model, &load_images(data_path(cfg))?)?;
    Ok(Outcome::ok(serde_json::to_value(report)?, vec![]))
}

fn arcp_config(cfg: &RunConfig) -> ArcpConfig {
    ArcpConfig { fusion: cfg.arcp.fusion.clone(), trajectory: cfg.arcp.trajectory.clone(), light: cfg.arcp.light.clone() }
}

fn load_crossing(cfg: &RunConfig) -> Result<Vec<synth::CrossingSample>> {
    let a = &cfg.arcp;
    synth::load_crossing_dataset(data_path(cfg), &model_window(&a.trajectory), a.fusion.frame_rate)
}

fn train_arcp(cfg: &RunConfig) -> Result<Outcome> {
    let a = &cfg.arcp;
    let data = load_crossing(cfg)?;
    let variant = a.fusion.variant;
    let needs_trajectory = variant.uses_gaussians() || variant == FusionVariant::Ncp;
    let needs_light = variant != FusionVariant::ArcpMp;
    let mut pretrain = serde_json::Map::new();

    let trajectory = match &cfg.paths.trajectory_checkpoint {
        Some(p) => checkpoint::load_expecting(p, &a.trajectory)?,
        None => {
            let mut m = Model::build(a.trajectory.clone(), cfg.seed)?;
            if needs_trajectory && !a.cold_start {
                let windows: Windows = data.iter().map(|s| (s.obs.clone(), s.target.clone())).collect();
                let r = iatcnn::train_with(&mut m, &windows, &a.pretrain_trajectory, |e, l| {
                    eprintln!("trajectory epoch {:>3}  loss {l:.5}", e + 1)
                })?;
                pretrain.insert("trajectory_epoch_loss".into(), json!(r.epoch_loss));
            }
            m
        }
    };
    let light = match &cfg.paths.light_checkpoint {
        Some(p) => checkpoint::load_expecting(p, &a.light)?,
        None => {
            let mut m = AtteNet::build(a.light.clone(), cfg.seed.wrapping_add(1))?;
            if needs_light && !a.cold_start {
                let images: Vec<LabeledImage> = data.iter().map(|s| s.image.clone()).collect();
                let h = attenet::train_classifier(&mut m, &images, &a.pretrain_light)?;
                eprintln!("light pretraining accuracy {:?}", h.epoch_accuracy);
                pretrain.insert("light_history".into(), serde_json::to_value(h)?);
            }
            m
        }
    };
    let mut model = Arcp::build(a.fusion.clone(), trajectory, light, cfg.seed.wrapping_add(2))?;
    let report = model.joint_train(&data, &a.joint)?;
    for (e, l) in report.epoch_loss.iter().enumerate() {
        eprintln!("joint epoch {:>3}  loss {l:.5}", e + 1);
    }
    checkpoint::save(out(cfg, "arcp.ckpt"), &model)?;
    let train_report = fusion::eval_crossing(&model, &data)?;
    Ok(Outcome::ok(
        json!({
            "variant": variant.name(),
            "samples": data.len(),
            "pretraining": pretrain,
            "joint_epoch_loss": report.epoch_loss,
            "train": train_report,
        }),
        vec!["arcp.ckpt".into()],
    ))
}

fn eval_arcp(cfg: &RunConfig) -> Result<Outcome> {
    let model: Arcp = checkpoint::load_expecting(checkpoint_path(cfg), &arcp_config(cfg))?;
    let data = load_crossing(cfg)?;
    let report = fusion::eval_crossing(&model, &data)?;
    let proba = model.predict_proba(&data)?;
    let safe = CrossingLabel::Cross.index();
    let scores: Vec<f64> = proba.iter().map(|p| p[safe]).collect();
    let labels: Vec<bool> = data.iter().map(|s| s.label == CrossingLabel::Cross).collect();
    let curve = metrics::pr_curve(&scores, &labels)?;
    let path = out(cfg, "pr.csv");
    metrics::write_pr_csv(&curve, fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
    Ok(Outcome::ok(
        json!({ "variant": model.variant().name(), "samples": data.len(), "report": report }),
        vec!["pr.csv".into()],
    ))
}

fn predict(cfg: &RunConfig) -> Result<Outcome> {
    let model: Model = checkpoint::load_expecting(checkpoint_path(cfg), &cfg.trajectory)?;
    let scenes = load_scenes(data_path(cfg), cfg.frame_rate)?;
    let path = out(cfg, "predictions.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("predictions.csv: {e}"));
    w.write_record([
        "scene", "window_start", "agent_id", "frame", "x", "y", "v", "yaw_deg", "sigma_x", "sigma_y", "sigma_v", "rho",
        "valid",
    ])
    .map_err(csv_err)?;
    let (mut windows, mut rows) = (0, 0);
    for (si, scene) in scenes.iter().enumerate() {
        for (obs, _) in window_scene(scene, &cfg.window)? {
            windows += 1;
            let pred = model.forward(&obs)?;
            let points = iatcnn::predict_points(&pred);
            let valid = pred.predicted_mask();
            let t_pred = pred.t_pred();
            for (a, id) in obs.agent_ids.iter().enumerate() {
                let Some(id) = id else { continue };
                for (t, p) in points[a].iter().enumerate() {
                    let g = pred.gaussian(a, t);
                    let frame = obs.start_frame as usize + obs.len() + t;
                    w.write_record([
                        si.to_string(),
                        obs.start_frame.to_string(),
                        id.to_string(),
                        frame.to_string(),
                        p.x.to_string(),
                        p.y.to_string(),
                        p.v.to_string(),
                        p.yaw_deg.to_string(),
                        g.sigma_x.to_string(),
                        g.sigma_y.to_string(),
                        g.sigma_v.to_string(),
                        g.rho.to_string(),
                        u8::from(valid[a * t_pred + t]).to_string(),
                    ])
                    .map_err(csv_err)?;
                    rows += 1;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Outcome::ok(json!({ "windows": windows, "rows": rows }), vec!["predictions.csv".into()]))
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let report = gradcheck::run_suite(&cfg.gradcheck)?;
    for r in &report.results {
        eprintln!(
            "{} {:<28} cases {:>4}  max rel error {:.3e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.cases,
            r.max_rel_error
        );
    }
    eprintln!("gradcheck finished in {:.1}s", report.seconds);
    Ok(Outcome { metrics: json!({ "results": report.results, "all_passed": report.all_passed() }), artifacts: vec![], passed: report.all_passed() })
}
