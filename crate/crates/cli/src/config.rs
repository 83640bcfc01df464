//! Run configuration: named presets, JSON files and `--set` overrides merged
//! into one fully resolved [`RunConfig`].

use std::path::{Path, PathBuf};

use arcp_core::attenet::{AtteNetConfig, ClassifierTrainConfig};
use arcp_core::data::WindowSpec;
use arcp_core::fusion::{FusionConfig, JointTrainConfig};
use arcp_core::gradcheck::GradCheckConfig;
use arcp_core::iatcnn::{ModelConfig, TrainConfig, Variant};
use arcp_core::synth::{IntersectionConfig, SFParams};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Synth,
    TrainMp,
    EvalMp,
    TrainTl,
    EvalTl,
    TrainArcp,
    EvalArcp,
    Predict,
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyperparameters: 100 epochs everywhere, full-width models.
    Paper,
    /// Reduced models and schedules that finish in minutes on one core.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Social-forces scenes as canonical trajectory CSVs.
    SocialForces,
    /// Coloured-disc images for the traffic-light classifier.
    Disc,
    /// Intersection crossing windows with signal images and labels.
    Intersection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Input dataset: a scene CSV or directory of them (trajectory tasks),
    /// an image directory or its `labels.csv` (light tasks), or a crossing
    /// dataset directory (ARCP tasks).
    pub data: Option<PathBuf>,
    /// Optional validation images for `train-tl`.
    pub val_data: Option<PathBuf>,
    /// Checkpoint read by the eval tasks and `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Pretrained IA-TCNN checkpoint used to bootstrap `train-arcp`.
    pub trajectory_checkpoint: Option<PathBuf>,
    /// Pretrained AtteNet checkpoint used to bootstrap `train-arcp`.
    pub light_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub classes: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    /// Social-forces scene count; scene `i` holds `1 + i % max_agents` agents.
    pub scenes: usize,
    pub max_agents: usize,
    pub steps: usize,
    pub social_forces: SFParams,
    pub disc: DiscConfig,
    /// Training split; `n_scenes` is its size.
    pub intersection: IntersectionConfig,
    /// Size of the held-out intersection split.
    pub test_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ArcpSection {
    pub fusion: FusionConfig,
    pub trajectory: ModelConfig,
    pub light: AtteNetConfig,
    /// Skip pretraining of sub-models that have no checkpoint.
    pub cold_start: bool,
    pub pretrain_trajectory: TrainConfig,
    pub pretrain_light: ClassifierTrainConfig,
    pub joint: JointTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub preset: Preset,
    /// Drives data generation and model initialisation.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Frames per second of trajectory CSVs.
    pub frame_rate: f64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub window: WindowSpec,
    /// Trailing fraction of windows held out for evaluation.
    pub test_fraction: f64,
    pub trajectory: ModelConfig,
    pub train: TrainConfig,
    pub attenet: AtteNetConfig,
    pub classifier: ClassifierTrainConfig,
    pub arcp: ArcpSection,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, task: Task) -> RunConfig {
        let desk = preset == Preset::Desk;
        let window = WindowSpec { n_max: if desk { 6 } else { 32 }, ..WindowSpec::default() };
        let model = |n_max| {
            let base = if desk { ModelConfig::desk(Variant::IaTcnn) } else { ModelConfig::paper(Variant::IaTcnn) };
            ModelConfig { n_max, ..base }
        };
        let intersection = IntersectionConfig { n_scenes: if desk { 1600 } else { 400 }, ..IntersectionConfig::default() };
        let train = if desk { TrainConfig::desk() } else { TrainConfig::default() };
        let classifier = ClassifierTrainConfig { epochs: if desk { 10 } else { 100 }, ..ClassifierTrainConfig::default() };
        RunConfig {
            task,
            preset,
            seed: 0,
            out_dir: PathBuf::from("out"),
            frame_rate: 2.5,
            paths: Paths::default(),
            synth: SynthConfig {
                kind: SynthKind::SocialForces,
                scenes: 200,
                max_agents: window.n_max,
                // spawns are staggered over the first frames
                steps: window.span() + 4,
                social_forces: SFParams::default(),
                disc: DiscConfig { train: 400, val: 100, size: 40, classes: 4, noise: 0.3 },
                intersection: intersection.clone(),
                test_scenes: if desk { 400 } else { 100 },
            },
            window,
            test_fraction: 0.2,
            trajectory: model(window.n_max),
            train,
            attenet: AtteNetConfig::default(),
            classifier,
            arcp: ArcpSection {
                fusion: FusionConfig::default(),
                trajectory: model(intersection.window.n_max),
                light: AtteNetConfig::fusion(),
                cold_start: false,
                pretrain_trajectory: train,
                pretrain_light: ClassifierTrainConfig { epochs: if desk { 3 } else { 100 }, ..classifier },
                joint: if desk { JointTrainConfig::desk() } else { JointTrainConfig::default() },
            },
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Builds the resolved configuration for `task`: the preset named by the
/// overrides, the file or `desk`, then the file, then every `key=value`
/// override in order. Values that are not valid JSON are taken as strings.
pub fn resolve(task: Task, file: Option<&Path>, sets: &[String]) -> Result<RunConfig, String> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            if !v.is_object() {
                return Err(format!("{}: top level must be a JSON object", p.display()));
            }
            v
        }
        None => Value::Object(Map::new()),
    };
    let overrides = sets.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    let preset_value = overrides
        .iter()
        .rev()
        .find(|(k, _)| k.len() == 1 && k[0] == "preset")
        .map(|(_, v)| v.clone())
        .or_else(|| file_value.get("preset").cloned())
        .unwrap_or(Value::String("desk".into()));
    let preset: Preset = serde_json::from_value(preset_value).map_err(|e| format!("preset: {e}"))?;
    let mut value = serde_json::to_value(RunConfig::preset(preset, task)).expect("presets serialise");
    merge(&mut value, file_value);
    for (key, v) in overrides {
        set_path(&mut value, &key, v)?;
    }
    value["task"] = serde_json::to_value(task).expect("task serialises");
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| format!("{}: {}", e.path(), e.inner()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("--set {s}: expected key=value"))?;
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(format!("--set {s}: malformed key"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.split('.').map(String::from).collect(), value))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &[String], v: Value) -> Result<(), String> {
    let mut cur = root;
    for (i, part) in key.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(format!("--set {}: `{}` is not an object", key.join("."), key[..i].join(".")));
        };
        if i + 1 == key.len() {
            map.insert(part.clone(), v);
            return Ok(());
        }
        cur = map.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys are non-empty")
}

fn field(name: &'static str) -> impl Fn(arcp_core::Error) -> String {
    move |e| format!("{name}: {e}")
}

fn need<'a>(p: &'a Option<PathBuf>, field: &str, task: Task) -> Result<&'a Path, String> {
    let p = p.as_deref().ok_or_else(|| format!("paths.{field}: required by {}", task_name(task)))?;
    exists(p, field)?;
    Ok(p)
}

fn exists(p: &Path, field: &str) -> Result<(), String> {
    if p.exists() {
        Ok(())
    } else {
        Err(format!("paths.{field}: {} does not exist", p.display()))
    }
}

pub fn task_name(task: Task) -> String {
    serde_json::to_value(task).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn check_dims(window: &WindowSpec, model: &ModelConfig, what: &str) -> Result<(), String> {
    if (window.t_obs, window.t_pred, window.n_max) != (model.t_obs, model.t_pred, model.n_max) {
        return Err(format!(
            "{what}: t_obs/t_pred/n_max ({}/{}/{}) must match window ({}/{}/{})",
            model.t_obs, model.t_pred, model.n_max, window.t_obs, window.t_pred, window.n_max
        ));
    }
    Ok(())
}

/// Window implied by a trajectory model, used to read crossing datasets.
pub fn model_window(m: &ModelConfig) -> WindowSpec {
    WindowSpec { t_obs: m.t_obs, t_pred: m.t_pred, stride: m.t_obs + m.t_pred, n_max: m.n_max }
}

/// Semantic checks beyond the schema; failures are validation errors.
pub fn validate(cfg: &RunConfig) -> Result<(), String> {
    if !(cfg.frame_rate > 0.0) {
        return Err("frame_rate: must be positive".into());
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err("test_fraction: must lie in [0, 1)".into());
    }
    let p = &cfg.paths;
    match cfg.task {
        Task::Synth => {
            let s = &cfg.synth;
            match s.kind {
                SynthKind::SocialForces => {
                    s.social_forces.validate().map_err(field("synth.social_forces"))?;
                    if s.scenes == 0 || s.max_agents == 0 || s.steps < 2 {
                        return Err("synth: scenes and max_agents must be positive and steps at least 2".into());
                    }
                }
                SynthKind::Disc => {
                    if s.disc.train == 0 || s.disc.size == 0 || !matches!(s.disc.classes, 3 | 4) {
                        return Err("synth.disc: train and size must be positive, classes 3 or 4".into());
                    }
                }
                SynthKind::Intersection => {
                    s.intersection.window.validate().map_err(field("synth.intersection.window"))?;
                    if s.intersection.n_scenes == 0 {
                        return Err("synth.intersection.n_scenes: must be positive".into());
                    }
                }
            }
        }
        Task::TrainMp | Task::EvalMp | Task::Predict => {
            cfg.window.validate().map_err(field("window"))?;
            cfg.trajectory.validate().map_err(field("trajectory"))?;
            check_dims(&cfg.window, &cfg.trajectory, "trajectory")?;
            need(&p.data, "data", cfg.task)?;
            if cfg.task != Task::TrainMp {
                need(&p.checkpoint, "checkpoint", cfg.task)?;
            }
        }
        Task::TrainTl | Task::EvalTl => {
            cfg.attenet.validate().map_err(field("attenet"))?;
            need(&p.data, "data", cfg.task)?;
            if let Some(v) = &p.val_data {
                exists(v, "val_data")?;
            }
            if cfg.task == Task::EvalTl {
                need(&p.checkpoint, "checkpoint", cfg.task)?;
            }
        }
        Task::TrainArcp | Task::EvalArcp => {
            let a = &cfg.arcp;
            a.fusion.validate().map_err(field("arcp.fusion"))?;
            a.trajectory.validate().map_err(field("arcp.trajectory"))?;
            a.light.validate().map_err(field("arcp.light"))?;
            if a.light.widths[4] != a.fusion.c || a.light.final_side() != a.fusion.h || a.fusion.h != a.fusion.w {
                return Err(format!(
                    "arcp.light: final feature map {}x{}x{} does not match fusion h/w/c {}/{}/{}",
                    a.light.widths[4],
                    a.light.final_side(),
                    a.light.final_side(),
                    a.fusion.h,
                    a.fusion.w,
                    a.fusion.c
                ));
            }
            need(&p.data, "data", cfg.task)?;
            if cfg.task == Task::EvalArcp {
                need(&p.checkpoint, "checkpoint", cfg.task)?;
            } else {
                if let Some(t) = &p.trajectory_checkpoint {
                    exists(t, "trajectory_checkpoint")?;
                }
                if let Some(l) = &p.light_checkpoint {
                    exists(l, "light_checkpoint")?;
                }
            }
        }
        Task::Gradcheck => {
            let g = &cfg.gradcheck;
            if g.cases_per_op == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) {
                return Err("gradcheck: cases_per_op, step and tolerance must be positive".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_structurally() {
        for preset in [Preset::Paper, Preset::Desk] {
            let v = serde_json::to_value(RunConfig::preset(preset, Task::Gradcheck)).unwrap();
            let back: RunConfig = serde_json::from_value(v).unwrap();
            assert_eq!(back, RunConfig::preset(preset, Task::Gradcheck));
            validate(&back).unwrap();
        }
    }

    #[test]
    fn overrides_win_and_parse_json_or_strings() {
        let sets = ["seed=9".to_string(), "trajectory.variant=IA-LinConv".into(), "preset=paper".into()];
        let cfg = resolve(Task::Gradcheck, None, &sets).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trajectory.variant, Variant::IaLinConv);
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.train.epochs, 100);
    }

    #[test]
    fn schema_errors_carry_the_field_path() {
        let e = resolve(Task::Gradcheck, None, &["train.epochs=\"ten\"".into()]).unwrap_err();
        assert!(e.starts_with("train.epochs"), "{e}");
        let e = resolve(Task::Gradcheck, None, &["arcp.fusion.bogus=1".into()]).unwrap_err();
        assert!(e.starts_with("arcp.fusion") && e.contains("bogus"), "{e}");
        let e = resolve(Task::Gradcheck, None, &["seed.x=1".into()]).unwrap_err();
        assert!(e.contains("not an object"), "{e}");
    }

    #[test]
    fn read_tasks_require_existing_paths() {
        let e = resolve(Task::EvalMp, None, &[]).unwrap_err();
        assert!(e.contains("paths.data"), "{e}");
        let e = resolve(Task::TrainMp, None, &["paths.data=/definitely/not/here".into()]).unwrap_err();
        assert!(e.contains("does not exist"), "{e}");
    }
}
