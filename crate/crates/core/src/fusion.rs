//! Road-crossing predictor: trajectory Gaussians projected to the shape of
//! the classifier's last feature map, concatenated with it along channels,
//! then a hidden layer and a two-way softmax. Also hosts the comparison
//! variants and joint training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenet::{self, AtteNet, Mode};
use crate::data::{constant_velocity_forecast, quat_to_yaw, ObservationBatch, TargetBatch, FEATURES};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::iatcnn::{self, weighted_term, Model, PredictionBatch};
use crate::image::LabeledImage;
use crate::labels::{CrossingLabel, TrafficLightState};
use crate::metrics::{classification_report, ConfusionMatrix, PointSet, TrajectoryAccumulator, TrajectoryScore};
use crate::optim::{clip_global_norm, AdamConfig, OptimizerState, DEFAULT_CLIP_NORM};
use crate::params::{Bound, ParamId, ParamStore};
use crate::par;
pub use crate::synth::{CrossingSample, Rect};
use crate::tensor::Tensor;

/// μx, μy, μv, σx, σy, σv, ρ, qw, qz per agent and step.
pub const GAUSSIAN_PARAMS: usize = 9;
/// x, y, v, yaw (radians) per agent and step in the naive predictor.
pub const POINT_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum FusionVariant {
    #[serde(rename = "ARCP(TLR+MP)")]
    ArcpFull,
    #[serde(rename = "ARCP(MP)")]
    ArcpMp,
    #[serde(rename = "ARCP(TLR)")]
    ArcpTlr,
    #[serde(rename = "NCP")]
    Ncp,
    #[serde(rename = "CV+TLR")]
    CvTlr,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::ArcpFull,
        FusionVariant::ArcpMp,
        FusionVariant::ArcpTlr,
        FusionVariant::Ncp,
        FusionVariant::CvTlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::ArcpFull => "ARCP(TLR+MP)",
            FusionVariant::ArcpMp => "ARCP(MP)",
            FusionVariant::ArcpTlr => "ARCP(TLR)",
            FusionVariant::Ncp => "NCP",
            FusionVariant::CvTlr => "CV+TLR",
        }
    }

    /// Whether the trajectory Gaussians feed the learned head.
    pub fn uses_gaussians(self) -> bool {
        matches!(self, FusionVariant::ArcpFull | FusionVariant::ArcpMp)
    }

    /// Whether classifier feature maps feed the learned head.
    pub fn uses_light_features(self) -> bool {
        matches!(self, FusionVariant::ArcpFull | FusionVariant::ArcpTlr)
    }

    /// Whether joint training updates the classifier.
    pub fn trains_light(self) -> bool {
        matches!(self, FusionVariant::ArcpFull | FusionVariant::ArcpTlr | FusionVariant::CvTlr)
    }

    pub fn has_head(self) -> bool {
        self != FusionVariant::CvTlr
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub hidden: usize,
    pub variant: FusionVariant,
    /// Corridor, horizon (s) and frame rate used by the CV+TLR rule.
    pub corridor: Rect,
    pub horizon: f64,
    pub frame_rate: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d: 128,
            h: 2,
            w: 2,
            c: 32,
            hidden: 512,
            variant: FusionVariant::ArcpFull,
            corridor: Rect { x_min: -2.0, x_max: 2.0, y_min: 1.0, y_max: 5.0 },
            horizon: 4.0,
            frame_rate: 2.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d != self.h * self.w * self.c {
            return Err(Error::InvalidArgument(format!(
                "D = {} must equal H·W·C = {}·{}·{}",
                self.d, self.h, self.w, self.c
            )));
        }
        if self.d == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("D and the hidden width must be positive".into()));
        }
        if !(self.horizon > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::InvalidArgument("horizon and frame rate must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon_frames(&self) -> usize {
        (self.horizon * self.frame_rate).round() as usize
    }
}

#[derive(Clone, Debug)]
struct HeadLayout {
    proj: Option<(ParamId, ParamId)>,
    hidden: Option<(ParamId, ParamId)>,
    out: Option<(ParamId, ParamId)>,
    s_tl: ParamId,
    s_c: ParamId,
}

/// Learned layers on top of the two subnetworks.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub config: FusionConfig,
    /// Flattened Gaussian width `n_max · T_pred · 9`.
    pub gaussian_len: usize,
    /// NCP input width `classes + n_max · T_pred · 4`.
    pub point_len: usize,
    pub classes: usize,
    pub params: ParamStore,
    layout: HeadLayout,
}

fn dense_params(p: &mut ParamStore, name: &str, n_out: usize, n_in: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    (
        p.add(format!("{name}.weight"), Tensor::glorot(&[n_out, n_in], n_in, n_out, rng)),
        p.add(format!("{name}.bias"), Tensor::zeros(&[n_out])),
    )
}

impl FusionHead {
    pub fn build(config: FusionConfig, n_max: usize, t_pred: usize, classes: usize, seed: u64) -> Result<FusionHead> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let gaussian_len = n_max * t_pred * GAUSSIAN_PARAMS;
        let point_len = classes + n_max * t_pred * POINT_FEATURES;
        let v = config.variant;
        let proj = v.uses_gaussians().then(|| dense_params(&mut p, "fusion.proj", config.d, gaussian_len, &mut rng));
        let hidden_in = match v {
            FusionVariant::ArcpFull => Some(2 * config.d),
            FusionVariant::ArcpMp | FusionVariant::ArcpTlr => Some(config.d),
            FusionVariant::Ncp => Some(point_len),
            FusionVariant::CvTlr => None,
        };
        let hidden = hidden_in.map(|n| dense_params(&mut p, "fusion.hidden", config.hidden, n, &mut rng));
        let out = v.has_head().then(|| dense_params(&mut p, "fusion.out", 2, config.hidden, &mut rng));
        let s_tl = p.add("fusion.s_tl", Tensor::zeros(&[1]));
        let s_c = p.add("fusion.s_c", Tensor::zeros(&[1]));
        Ok(FusionHead {
            config,
            gaussian_len,
            point_len,
            classes,
            params: p,
            layout: HeadLayout { proj, hidden, out, s_tl, s_c },
        })
    }

    pub fn loss_weight_ids(&self) -> (ParamId, ParamId) {
        (self.layout.s_tl, self.layout.s_c)
    }

    /// Crossing logits `[B, 2]`. Inputs are `[B, gaussian_len]` Gaussians,
    /// `[B, C, H, W]` classifier features, or `[B, point_len]` for NCP.
    pub fn logits_graph(&self, g: &mut Graph<'_>, bound: &Bound, gaussians: Option<Var>, tl: Option<Var>) -> Result<Var> {
        let cfg = &self.config;
        let v = cfg.variant;
        let missing = |what: &str| Error::InvalidArgument(format!("{v} requires {what}"));
        let (Some(hidden), Some(out)) = (self.layout.hidden, self.layout.out) else {
            return Err(Error::InvalidArgument(format!("{v} has no learned head")));
        };
        let tl_flat = |g: &mut Graph<'_>, t: Var| -> Result<Var> {
            let s = g.shape(t).to_vec();
            if s.len() != 4 || s[1..] != [cfg.c, cfg.h, cfg.w] {
                return Err(Error::shape("fusion light features", format!("[B,{},{},{}]", cfg.c, cfg.h, cfg.w), format!("{s:?}")));
            }
            g.reshape(t, &[s[0], cfg.d])
        };
        let z = match v {
            FusionVariant::ArcpFull | FusionVariant::ArcpMp => {
                let gs = gaussians.ok_or_else(|| missing("trajectory Gaussians"))?;
                let shape = g.shape(gs).to_vec();
                if shape.len() != 2 || shape[1] != self.gaussian_len {
                    return Err(Error::shape("fusion gaussians", format!("[B,{}]", self.gaussian_len), format!("{shape:?}")));
                }
                let b = shape[0];
                let (w, bias) = self.layout.proj.expect("projection exists for trajectory variants");
                let p = g.dense(gs, bound[w], Some(bound[bias]))?;
                let p = g.elu(p);
                if v == FusionVariant::ArcpMp {
                    p
                } else {
                    let t = tl.ok_or_else(|| missing("traffic-light features"))?;
                    let t = tl_flat(g, t)?;
                    let pm = g.reshape(p, &[b, cfg.c, cfg.h, cfg.w])?;
                    let tm = g.reshape(t, &[b, cfg.c, cfg.h, cfg.w])?;
                    let cat = g.concat(&[pm, tm], 1)?;
                    g.reshape(cat, &[b, 2 * cfg.d])?
                }
            }
            FusionVariant::ArcpTlr => {
                let t = tl.ok_or_else(|| missing("traffic-light features"))?;
                tl_flat(g, t)?
            }
            FusionVariant::Ncp => {
                let x = gaussians.ok_or_else(|| missing("point trajectories and light class"))?;
                let shape = g.shape(x).to_vec();
                if shape.len() != 2 || shape[1] != self.point_len {
                    return Err(Error::shape("ncp input", format!("[B,{}]", self.point_len), format!("{shape:?}")));
                }
                x
            }
            FusionVariant::CvTlr => unreachable!("checked above"),
        };
        let h = g.dense(z, bound[hidden.0], Some(bound[hidden.1]))?;
        let h = g.elu(h);
        g.dense(h, bound[out.0], Some(bound[out.1]))
    }

    /// Value-level fusion: Cross/DontCross probabilities per row.
    pub fn fuse_forward(&self, gaussians: Option<&Tensor>, tl_features: Option<&Tensor>) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let gv = gaussians.map(|t| g.constant(t.clone()));
        let tv = tl_features.map(|t| g.constant(t.clone()));
        let logits = self.logits_graph(&mut g, &bound, gv, tv)?;
        Ok(g.value(logits).data().chunks(2).map(|r| {
            let p = softmax(r);
            [p[0], p[1]]
        }).collect())
    }
}

/// Gaussian parameters of one window flattened agent-major, step-minor;
/// rows without an agent are zero.
pub fn flatten_gaussians(pred: &PredictionBatch, obs: &ObservationBatch) -> Vec<f64> {
    let (n, tp) = (pred.n_agents(), pred.t_pred());
    let mut out = vec![0.0; n * tp * GAUSSIAN_PARAMS];
    for a in (0..n).filter(|&a| obs.agent_ids[a].is_some()) {
        for t in 0..tp {
            let gp = pred.gaussian(a, t);
            let q = &pred.quat.data()[(a * tp + t) * 2..][..2];
            out[(a * tp + t) * GAUSSIAN_PARAMS..][..GAUSSIAN_PARAMS].copy_from_slice(&[
                gp.mu_x, gp.mu_y, gp.mu_v, gp.sigma_x, gp.sigma_y, gp.sigma_v, gp.rho, q[0], q[1],
            ]);
        }
    }
    out
}

/// Constant-velocity forecast with the last observed heading held.
pub fn cv_baseline_predict(obs: &ObservationBatch, t_pred: usize) -> PointSet {
    let cv = constant_velocity_forecast(obs, t_pred);
    let n = obs.n_agents();
    let mut yaw = vec![0.0; n * t_pred];
    for a in 0..n {
        if let Some(t) = (0..obs.len()).rev().find(|&t| obs.is_valid(a, t)) {
            let s = obs.slot(a, t);
            yaw[a * t_pred..(a + 1) * t_pred].fill(quat_to_yaw(s[3], s[4]).to_degrees());
        }
    }
    let d = cv.data();
    PointSet {
        n_agents: n,
        t_steps: t_pred,
        xy: d.chunks(3).map(|c| [c[0], c[1]]).collect(),
        yaw_deg: yaw,
        v: d.chunks(3).map(|c| c[2]).collect(),
    }
}

/// Pooled scores of [`cv_baseline_predict`] over every valid target slot.
pub fn evaluate_cv(windows: &[(ObservationBatch, TargetBatch)]) -> Result<TrajectoryScore> {
    let mut acc = TrajectoryAccumulator::default();
    for (o, t) in windows {
        acc.add(&cv_baseline_predict(o, t.len()), &PointSet::from_batch(t), &iatcnn::valid_mask(t))?;
    }
    acc.finish()
}

/// The CV+TLR rule: Red forbids crossing; otherwise any active agent whose
/// last observed or extrapolated position lies in the corridor within the
/// horizon forbids it.
pub fn cv_tlr_decide(light: TrafficLightState, obs: &ObservationBatch, cfg: &FusionConfig) -> CrossingLabel {
    if light == TrafficLightState::Red {
        return CrossingLabel::DontCross;
    }
    let steps = cfg.horizon_frames();
    let cv = cv_baseline_predict(obs, steps.max(1));
    let t_last = obs.len() - 1;
    for a in (0..obs.n_agents()).filter(|&a| obs.agent_ids[a].is_some()) {
        let now = obs.is_valid(a, t_last).then(|| {
            let s = obs.slot(a, t_last);
            [s[0], s[1]]
        });
        let ahead = (0..steps).map(|k| cv.xy[a * cv.t_steps + k]);
        if now.into_iter().chain(ahead).any(|p| cfg.corridor.contains(p[0], p[1])) {
            return CrossingLabel::DontCross;
        }
    }
    CrossingLabel::Cross
}

/// Trajectory model, classifier and fusion head.
#[derive(Clone, Debug)]
pub struct Arcp {
    pub head: FusionHead,
    pub trajectory: Model,
    pub light: AtteNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct JointTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            lr: 5e-5,
            epochs: 100,
            batch_size: 10,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 0,
        }
    }
}

impl JointTrainConfig {
    /// Few passes at a larger step over a larger synthetic set.
    pub fn desk() -> Self {
        JointTrainConfig { lr: 1e-3, epochs: 8, ..Self::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JointReport {
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossingReport {
    pub accuracy: f64,
    /// Precision and recall of the Safe (Cross) class.
    pub precision: f64,
    pub recall: f64,
    pub confusion: ConfusionMatrix,
}

struct StepVars {
    total: Var,
    crossing_logits: Option<Var>,
    light: Option<attenet::ClassifierVars>,
}

impl Arcp {
    pub fn build(config: FusionConfig, trajectory: Model, light: AtteNet, seed: u64) -> Result<Arcp> {
        config.validate()?;
        let lc = &light.config;
        let side = lc.final_side();
        if lc.widths[4] != config.c || side != config.h || side != config.w {
            return Err(Error::InvalidArgument(format!(
                "classifier ends in {}×{side}×{side} features but the fusion expects {}×{}×{}",
                lc.widths[4], config.c, config.h, config.w
            )));
        }
        let tc = &trajectory.config;
        let head = FusionHead::build(config, tc.n_max, tc.t_pred, lc.classes, seed)?;
        Ok(Arcp { head, trajectory, light })
    }

    pub fn variant(&self) -> FusionVariant {
        self.head.config.variant
    }

    fn check(&self, s: &CrossingSample) -> Result<()> {
        let tc = &self.trajectory.config;
        if s.obs.n_agents() != tc.n_max || s.obs.len() != tc.t_obs || s.target.len() != tc.t_pred {
            return Err(Error::shape(
                "crossing window",
                format!("{}x{} observed, {} predicted", tc.n_max, tc.t_obs, tc.t_pred),
                format!("{}x{} observed, {} predicted", s.obs.n_agents(), s.obs.len(), s.target.len()),
            ));
        }
        Ok(())
    }

    fn light_input(&self, samples: &[&CrossingSample], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let size = self.light.config.input_size;
        let crops: Vec<LabeledImage> = match rng {
            Some(r) => samples.iter().map(|s| attenet::prepare(&s.image, size, Some(&mut *r))).collect::<Result<_>>()?,
            None => samples.iter().map(|s| attenet::prepare(&s.image, size, None)).collect::<Result<_>>()?,
        };
        let refs: Vec<&LabeledImage> = crops.iter().collect();
        self.light.batch_tensor(&refs)
    }

    fn light_targets(&self, samples: &[&CrossingSample]) -> Result<Vec<usize>> {
        samples.iter().map(|s| attenet::class_index(&s.image, self.light.config.classes)).collect()
    }

    /// `[B, n_max·T_pred·9]` Gaussians with inactive agents zeroed.
    fn gaussians_graph(&self, g: &mut Graph<'_>, pred: &iatcnn::PredVars, samples: &[&CrossingSample]) -> Result<Var> {
        let tc = &self.trajectory.config;
        let rows_per = tc.n_max * tc.t_pred;
        let cat = g.concat(&[pred.mu, pred.sigma, pred.rho, pred.quat], 1)?;
        let active = Tensor::from_fn(&[samples.len() * rows_per, GAUSSIAN_PARAMS], |i| {
            let row = i / GAUSSIAN_PARAMS;
            let (w, a) = (row / rows_per, (row % rows_per) / tc.t_pred);
            if samples[w].obs.agent_ids[a].is_some() { 1.0 } else { 0.0 }
        });
        let m = g.constant(active);
        let masked = g.mul(cat, m)?;
        g.reshape(masked, &[samples.len(), self.head.gaussian_len])
    }

    /// NCP inputs: one-hot recognised light plus predicted points.
    pub fn ncp_inputs(&self, samples: &[&CrossingSample]) -> Result<Tensor> {
        let classes = self.light.config.classes;
        let x = self.light_input(samples, None)?;
        let probs = {
            let mut g = Graph::new();
            let bound = self.light.params.bind(&mut g);
            let xv = g.constant(x);
            let cv = self.light.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, Mode::Infer, None)?;
            g.value(cv.logits).clone()
        };
        let width = self.head.point_len;
        let mut out = Tensor::zeros(&[samples.len(), width]);
        for (i, s) in samples.iter().enumerate() {
            let row = &mut out.data_mut()[i * width..(i + 1) * width];
            row[attenet::argmax(&probs.data()[i * classes..(i + 1) * classes])] = 1.0;
            let pred = self.trajectory.forward(&s.obs)?;
            for (a, pts) in iatcnn::predict_points(&pred).iter().enumerate() {
                if s.obs.agent_ids[a].is_none() {
                    continue;
                }
                for (t, p) in pts.iter().enumerate() {
                    let o = classes + (a * pts.len() + t) * POINT_FEATURES;
                    row[o..o + POINT_FEATURES].copy_from_slice(&[p.x, p.y, p.v, p.yaw_deg.to_radians()]);
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_graph(
        &self,
        g: &mut Graph<'_>,
        tb: &Bound,
        lb: &Bound,
        hb: &Bound,
        samples: &[&CrossingSample],
        ncp_x: Option<&Tensor>,
        train_rng: Option<&mut ChaCha8Rng>,
        with_loss: bool,
    ) -> Result<StepVars> {
        let v = self.variant();
        let mut terms = Vec::new();
        let mut gaussians = None;
        if v.uses_gaussians() {
            let obs: Vec<&ObservationBatch> = samples.iter().map(|s| &s.obs).collect();
            let fv = self.trajectory.forward_graph(g, tb, &obs)?;
            gaussians = Some(self.gaussians_graph(g, &fv.pred, samples)?);
            if with_loss {
                let tgt: Vec<_> = samples.iter().map(|s| &s.target).collect();
                terms.push(self.trajectory.loss_graph(g, tb, &fv, &tgt)?.total);
            }
        }
        if let Some(x) = ncp_x {
            gaussians = Some(g.constant(x.clone()));
        }
        let (s_tl, s_c) = self.head.loss_weight_ids();
        let mut light = None;
        if v.uses_light_features() || (with_loss && v.trains_light()) {
            let mode = if train_rng.is_some() { Mode::Train } else { Mode::Infer };
            let mut rng = train_rng;
            let x = self.light_input(samples, rng.as_deref_mut())?;
            let xv = g.constant(x);
            let cv = self.light.forward_graph(g, lb, xv, mode, rng)?;
            if with_loss {
                let ce = g.softmax_cross_entropy(cv.logits, &self.light_targets(samples)?)?;
                terms.push(weighted_term(g, ce, hb[s_tl])?);
            }
            light = Some(cv);
        }
        let mut crossing_logits = None;
        if v.has_head() {
            let tl = if v.uses_light_features() { light.as_ref().map(|c| c.features) } else { None };
            let logits = self.head.logits_graph(g, hb, gaussians, tl)?;
            if with_loss {
                let y: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
                let ce = g.softmax_cross_entropy(logits, &y)?;
                terms.push(if v == FusionVariant::Ncp { ce } else { weighted_term(g, ce, hb[s_c])? });
            }
            crossing_logits = Some(logits);
        }
        let mut total = match terms.first() {
            Some(&t) => t,
            None => g.constant(Tensor::zeros(&[1])),
        };
        for &t in &terms[1.min(terms.len())..] {
            total = g.add(total, t)?;
        }
        Ok(StepVars { total, crossing_logits, light })
    }

    /// Total joint loss and per-store gradients for one batch (no dropout,
    /// centre crops), for gradient checks.
    pub fn loss_and_grads(&self, samples: &[&CrossingSample]) -> Result<(f64, [Vec<Tensor>; 3])> {
        for s in samples {
            self.check(s)?;
        }
        let ncp = if self.variant() == FusionVariant::Ncp { Some(self.ncp_inputs(samples)?) } else { None };
        let mut g = Graph::new();
        let tb = self.trajectory.params.bind(&mut g);
        let lb = self.light.params.bind(&mut g);
        let hb = self.head.params.bind(&mut g);
        let sv = self.step_graph(&mut g, &tb, &lb, &hb, samples, ncp.as_ref(), None, true)?;
        let grads = g.backward(sv.total)?;
        Ok((
            g.value(sv.total).item(),
            [
                self.trajectory.params.collect_grads(&grads, &tb),
                self.light.params.collect_grads(&grads, &lb),
                self.head.params.collect_grads(&grads, &hb),
            ],
        ))
    }

    /// Value of the joint objective used by [`Arcp::loss_and_grads`].
    pub fn loss(&self, samples: &[&CrossingSample]) -> Result<f64> {
        for s in samples {
            self.check(s)?;
        }
        let ncp = if self.variant() == FusionVariant::Ncp { Some(self.ncp_inputs(samples)?) } else { None };
        let mut g = Graph::new();
        let tb = self.trajectory.params.bind(&mut g);
        let lb = self.light.params.bind(&mut g);
        let hb = self.head.params.bind(&mut g);
        let sv = self.step_graph(&mut g, &tb, &lb, &hb, samples, ncp.as_ref(), None, true)?;
        Ok(g.value(sv.total).item())
    }

    /// One optimiser over every trained parameter; the objective sums
    /// `L·exp(−s) + s` over the variant's tasks.
    pub fn joint_train(&mut self, data: &[CrossingSample], cfg: &JointTrainConfig) -> Result<JointReport> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("crossing samples"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        for s in data {
            self.check(s)?;
        }
        let v = self.variant();
        let refs: Vec<&CrossingSample> = data.iter().collect();
        let ncp_all = if v == FusionVariant::Ncp { Some(self.ncp_inputs(&refs)?) } else { None };
        let train_traj = v.uses_gaussians();
        let train_light = v.trains_light();
        let mut opt = OptimizerState::adam(AdamConfig::with_lr(cfg.lr));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = JointReport { epoch_loss: Vec::new() };
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&CrossingSample> = chunk.iter().map(|&i| &data[i]).collect();
                let ncp_x = ncp_all.as_ref().map(|all| {
                    let w = all.shape()[1];
                    Tensor::from_fn(&[chunk.len(), w], |k| all.data()[chunk[k / w] * w + k % w])
                });
                let (loss, mut grads, light_vars) = {
                    let mut g = Graph::new();
                    let tb = self.trajectory.params.bind(&mut g);
                    let lb = self.light.params.bind(&mut g);
                    let hb = self.head.params.bind(&mut g);
                    let light_rng = train_light.then_some(&mut rng);
                    let sv = self.step_graph(&mut g, &tb, &lb, &hb, &batch, ncp_x.as_ref(), light_rng, true)?;
                    let gr = g.backward(sv.total)?;
                    let mut grads = Vec::new();
                    if train_traj {
                        grads.extend(self.trajectory.params.collect_grads(&gr, &tb));
                    }
                    if train_light {
                        grads.extend(self.light.params.collect_grads(&gr, &lb));
                    }
                    grads.extend(self.head.params.collect_grads(&gr, &hb));
                    (g.value(sv.total).item(), grads, sv.light)
                };
                if let (true, Some(lv)) = (train_light, light_vars) {
                    self.light.update_running_stats(lv);
                }
                clip_global_norm(&mut grads, cfg.clip_norm);
                let mut ps: Vec<&mut Tensor> = Vec::new();
                if train_traj {
                    ps.extend(self.trajectory.params.tensors_mut());
                }
                if train_light {
                    ps.extend(self.light.params.tensors_mut());
                }
                ps.extend(self.head.params.tensors_mut());
                opt.step(&mut ps, &grads)?;
                sum += loss * chunk.len() as f64;
            }
            report.epoch_loss.push(sum / data.len() as f64);
        }
        Ok(report)
    }

    /// Cross/DontCross probabilities (one-hot for the rule-based variant).
    pub fn predict_proba(&self, samples: &[CrossingSample]) -> Result<Vec<[f64; 2]>> {
        for s in samples {
            self.check(s)?;
        }
        let chunks: Vec<&[CrossingSample]> = samples.chunks(32).collect();
        let parts = par::map_slice(&chunks, |chunk| self.predict_chunk(chunk));
        let mut out = Vec::with_capacity(samples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn predict_chunk(&self, chunk: &[CrossingSample]) -> Result<Vec<[f64; 2]>> {
        let refs: Vec<&CrossingSample> = chunk.iter().collect();
        if self.variant() == FusionVariant::CvTlr {
            let x = self.light_input(&refs, None)?;
            let mut g = Graph::new();
            let lb = self.light.params.bind(&mut g);
            let xv = g.constant(x);
            let cv = self.light.forward_graph::<ChaCha8Rng>(&mut g, &lb, xv, Mode::Infer, None)?;
            let classes = self.light.config.classes;
            let states = TrafficLightState::classes(classes).expect("validated class count");
            return Ok(g
                .value(cv.logits)
                .data()
                .chunks(classes)
                .zip(chunk)
                .map(|(l, s)| match cv_tlr_decide(states[attenet::argmax(l)], &s.obs, &self.head.config) {
                    CrossingLabel::Cross => [1.0, 0.0],
                    CrossingLabel::DontCross => [0.0, 1.0],
                })
                .collect());
        }
        let ncp = if self.variant() == FusionVariant::Ncp { Some(self.ncp_inputs(&refs)?) } else { None };
        let mut g = Graph::new();
        let tb = self.trajectory.params.bind(&mut g);
        let lb = self.light.params.bind(&mut g);
        let hb = self.head.params.bind(&mut g);
        let sv = self.step_graph(&mut g, &tb, &lb, &hb, &refs, ncp.as_ref(), None, false)?;
        let logits = sv.crossing_logits.expect("learned variants have a head");
        Ok(g.value(logits).data().chunks(2).map(|r| {
            let p = softmax(r);
            [p[0], p[1]]
        }).collect())
    }

    pub fn predict(&self, samples: &[CrossingSample]) -> Result<Vec<CrossingLabel>> {
        Ok(self
            .predict_proba(samples)?
            .iter()
            .map(|p| if p[0] >= p[1] { CrossingLabel::Cross } else { CrossingLabel::DontCross })
            .collect())
    }
}

/// Accuracy plus precision and recall of the Safe (Cross) class.
pub fn crossing_report(predicted: &[CrossingLabel], truth: &[CrossingLabel]) -> Result<CrossingReport> {
    let p: Vec<usize> = predicted.iter().map(|l| l.index()).collect();
    let t: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    let r = classification_report(&p, &t, 2)?;
    let safe = CrossingLabel::Cross.index();
    Ok(CrossingReport {
        accuracy: r.accuracy,
        precision: r.precision[safe],
        recall: r.recall[safe],
        confusion: r.confusion,
    })
}

pub fn eval_crossing(model: &Arcp, data: &[CrossingSample]) -> Result<CrossingReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("crossing samples"));
    }
    let pred = model.predict(data)?;
    let truth: Vec<CrossingLabel> = data.iter().map(|s| s.label).collect();
    crossing_report(&pred, &truth)
}

/// Shape of the flattened window features fed to the trajectory model.
pub fn window_feature_len(n_max: usize, t_obs: usize) -> usize {
    n_max * t_obs * FEATURES
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attenet::AtteNetConfig;
    use crate::data::{AgentBatch, WindowSpec};
    use crate::iatcnn::{ModelConfig, Variant};
    use crate::synth::{gen_intersection, IntersectionConfig};

    fn small_parts() -> (Model, AtteNet, FusionConfig, Vec<CrossingSample>) {
        let spec = WindowSpec { t_obs: 4, t_pred: 3, stride: 7, n_max: 3 };
        let traj = Model::build(
            ModelConfig { kernel_size: 2, filters: vec![4, 4, 4], t_obs: 4, t_pred: 3, n_max: 3, ..ModelConfig::desk(Variant::IaTcnn) },
            1,
        )
        .unwrap();
        let light = AtteNet::build(
            AtteNetConfig { widths: vec![4, 4, 8, 8, 8], input_size: 16, ..AtteNetConfig::default() },
            2,
        )
        .unwrap();
        let cfg = FusionConfig { d: 8, h: 1, w: 1, c: 8, hidden: 16, ..FusionConfig::default() };
        let ic = IntersectionConfig { n_scenes: 6, window: spec, image_size: 20, ..IntersectionConfig::default() };
        let data = gen_intersection(&ic, 3).unwrap();
        (traj, light, cfg, data)
    }

    fn arcp(variant: FusionVariant) -> (Arcp, Vec<CrossingSample>) {
        let (t, l, c, d) = small_parts();
        (Arcp::build(FusionConfig { variant, ..c }, t, l, 4).unwrap(), d)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("ARCP".parse::<FusionVariant>().is_err());
    }

    #[test]
    fn toy_fusion_shapes() {
        let cfg = FusionConfig::default();
        let head = FusionHead::build(cfg.clone(), 4, 12, 4, 0).unwrap();
        assert_eq!(head.gaussian_len, 4 * 12 * 9);
        let mut g = Graph::new();
        let bound = head.params.bind(&mut g);
        let gs = g.constant(Tensor::from_fn(&[3, head.gaussian_len], |i| (i as f64 * 0.01).sin()));
        let tl = g.constant(Tensor::from_fn(&[3, 32, 2, 2], |i| (i as f64 * 0.1).cos()));
        let logits = head.logits_graph(&mut g, &bound, Some(gs), Some(tl)).unwrap();
        assert_eq!(g.shape(logits), &[3, 2]);
        let (w, _) = head.layout.hidden.unwrap();
        assert_eq!(head.params.get(w).shape(), &[512, 2 * 128]);
        assert!(FusionConfig { d: 100, ..cfg }.validate().is_err());
    }

    #[test]
    fn probabilities_are_a_simplex_and_inputs_are_required() {
        let head = FusionHead::build(FusionConfig::default(), 4, 12, 4, 1).unwrap();
        let gs = Tensor::from_fn(&[2, head.gaussian_len], |i| i as f64 * 1e-3);
        let tl = Tensor::from_fn(&[2, 32, 2, 2], |i| -(i as f64) * 1e-2);
        for p in head.fuse_forward(Some(&gs), Some(&tl)).unwrap() {
            assert!(p[0] > 0.0 && p[1] > 0.0);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
        assert!(head.fuse_forward(Some(&gs), None).is_err());
        assert!(head.fuse_forward(None, Some(&tl)).is_err());
        let mp = FusionHead::build(FusionConfig { variant: FusionVariant::ArcpMp, ..FusionConfig::default() }, 4, 12, 4, 1).unwrap();
        assert!(mp.fuse_forward(Some(&gs), None).is_ok());
        assert!(mp.fuse_forward(None, Some(&tl)).is_err());
    }

    #[test]
    fn flattening_order_and_inactive_zeros() {
        let (m, _, _, data) = small_parts();
        let s = data.iter().find(|s| s.obs.agent_ids.iter().any(Option::is_none)).expect("a padded window");
        let pred = m.forward(&s.obs).unwrap();
        let flat = flatten_gaussians(&pred, &s.obs);
        for a in 0..3 {
            for t in 0..3 {
                let chunk = &flat[(a * 3 + t) * 9..][..9];
                if s.obs.agent_ids[a].is_none() {
                    assert!(chunk.iter().all(|&v| v == 0.0));
                } else {
                    let gp = pred.gaussian(a, t);
                    assert_eq!(chunk[0], gp.mu_x);
                    assert_eq!(chunk[5], gp.sigma_v);
                    assert_eq!(chunk[6], gp.rho);
                }
            }
        }
        let (arcp, _) = arcp(FusionVariant::ArcpMp);
        let mut g = Graph::new();
        let tb = arcp.trajectory.params.bind(&mut g);
        let fv = arcp.trajectory.forward_graph(&mut g, &tb, &[&s.obs]).unwrap();
        let gv = arcp.gaussians_graph(&mut g, &fv.pred, &[s]).unwrap();
        let graph_flat = g.value(gv).data().to_vec();
        let m2 = arcp.trajectory.forward(&s.obs).unwrap();
        assert_eq!(graph_flat, flatten_gaussians(&m2, &s.obs));
    }

    #[test]
    fn cv_baseline_examples() {
        let mut obs = AgentBatch::zeros(2, 2, 0);
        obs.agent_ids = vec![Some(0), Some(1)];
        for t in 0..2 {
            obs.mask.data_mut()[t] = 1.0;
            obs.mask.data_mut()[2 + t] = 1.0;
            obs.features.data_mut()[t * 5..t * 5 + 5].copy_from_slice(&[t as f64, 0.0, 1.0, 1.0, 0.0]);
            obs.features.data_mut()[10 + t * 5..10 + t * 5 + 5].copy_from_slice(&[3.0, 4.0, 0.0, 1.0, 0.0]);
        }
        let p = cv_baseline_predict(&obs, 3);
        assert_eq!(&p.xy[..3], &[[2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
        assert!(p.xy[3..].iter().all(|&xy| xy == [3.0, 4.0]));
        assert!(p.yaw_deg.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn cv_tlr_rule() {
        let cfg = FusionConfig::default();
        let mut obs = AgentBatch::zeros(1, 2, 0);
        obs.agent_ids = vec![Some(0)];
        obs.mask.data_mut().fill(1.0);
        // heading toward the corridor at 1 m per frame from x = -8
        for t in 0..2 {
            obs.features.data_mut()[t * 5..t * 5 + 5].copy_from_slice(&[-9.0 + t as f64, 2.0, 2.5, 1.0, 0.0]);
        }
        assert_eq!(cv_tlr_decide(TrafficLightState::Green, &obs, &cfg), CrossingLabel::DontCross);
        assert_eq!(cv_tlr_decide(TrafficLightState::Red, &AgentBatch::zeros(1, 2, 0), &cfg), CrossingLabel::DontCross);
        assert_eq!(cv_tlr_decide(TrafficLightState::Off, &AgentBatch::zeros(1, 2, 0), &cfg), CrossingLabel::Cross);
        // moving away
        for t in 0..2 {
            obs.features.data_mut()[t * 5] = -9.0 - t as f64;
        }
        assert_eq!(cv_tlr_decide(TrafficLightState::Green, &obs, &cfg), CrossingLabel::Cross);
    }

    #[test]
    fn mp_variant_ignores_images_and_tlr_ignores_trajectories() {
        let (mp, data) = arcp(FusionVariant::ArcpMp);
        let mut altered = data.clone();
        for s in &mut altered {
            s.image.pixels.iter_mut().for_each(|p| *p = 1.0 - *p);
        }
        assert_eq!(mp.predict_proba(&data).unwrap(), mp.predict_proba(&altered).unwrap());
        let (tlr, data) = arcp(FusionVariant::ArcpTlr);
        let mut altered = data.clone();
        for s in &mut altered {
            s.obs.features.data_mut().iter_mut().for_each(|v| *v += 3.5);
        }
        assert_eq!(tlr.predict_proba(&data).unwrap(), tlr.predict_proba(&altered).unwrap());
    }

    #[test]
    fn zero_task_weights_give_the_plain_sum() {
        let (a, data) = arcp(FusionVariant::ArcpTlr);
        let refs: Vec<&CrossingSample> = data.iter().collect();
        let (total, _) = a.loss_and_grads(&refs).unwrap();
        let mut g = Graph::new();
        let tb = a.trajectory.params.bind(&mut g);
        let lb = a.light.params.bind(&mut g);
        let hb = a.head.params.bind(&mut g);
        let sv = a.step_graph(&mut g, &tb, &lb, &hb, &refs, None, None, false).unwrap();
        let lc = g.softmax_cross_entropy(sv.crossing_logits.unwrap(), &refs.iter().map(|s| s.label.index()).collect::<Vec<_>>()).unwrap();
        let targets = a.light_targets(&refs).unwrap();
        let ll = g.softmax_cross_entropy(sv.light.unwrap().logits, &targets).unwrap();
        let plain = g.value(lc).item() + g.value(ll).item();
        assert!((total - plain).abs() < 1e-12);
    }

    #[test]
    fn joint_training_is_seeded_and_all_variants_run() {
        for v in FusionVariant::ALL {
            let run = || {
                let (mut a, data) = arcp(v);
                let cfg = JointTrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, ..JointTrainConfig::default() };
                let r = a.joint_train(&data, &cfg).unwrap();
                (r.epoch_loss, a.predict_proba(&data).unwrap())
            };
            assert_eq!(run(), run(), "{v}");
        }
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let (mut a, mut data) = arcp(FusionVariant::ArcpFull);
        data[0].obs = AgentBatch::zeros(5, 4, 0);
        assert!(a.joint_train(&data, &JointTrainConfig::default()).is_err());
        assert!(a.predict(&data).is_err());
    }

    #[test]
    fn safe_class_report() {
        use CrossingLabel::*;
        let truth = [Cross, DontCross, Cross, DontCross];
        let r = crossing_report(&truth, &truth).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall), (1.0, 1.0, 1.0));
        let r = crossing_report(&[DontCross; 4], &truth).unwrap();
        assert_eq!((r.accuracy, r.recall), (0.5, 0.0));
    }
}
