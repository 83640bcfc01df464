//! Interaction-aware temporal convolutional trajectory predictor.
//!
//! Three causal blocks turn the padded `[N, 5, T_obs + T_pred]` input into
//! per-agent features. Each block first concatenates its input with the
//! mask-weighted mean over the agents present at the same timestep, which
//! is how agents see each other. A time-distributed affine head of width 9
//! emits `(μx, μy, μv, σx, σy, σv, ρ, qw, qz)` for every predicted step and a
//! parallel width-1 head emits the validity logit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{constant_velocity_forecast, ObservationBatch, TargetBatch, FEATURES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{clip_global_norm, AdamConfig, OptimizerState, DEFAULT_CLIP_NORM};
use crate::metrics::{PointSet, TrajectoryAccumulator, TrajectoryScore};
use crate::par;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const HEAD_WIDTH: usize = 9;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_MASK_LOGIT: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Variant {
    #[serde(rename = "IA-TCNN")]
    IaTcnn,
    #[serde(rename = "IA-LinConv")]
    IaLinConv,
    #[serde(rename = "IA-DResTCNN")]
    IaDResTcnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::IaTcnn, Variant::IaLinConv, Variant::IaDResTcnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IaTcnn => "IA-TCNN",
            Variant::IaLinConv => "IA-LinConv",
            Variant::IaDResTcnn => "IA-DResTCNN",
        }
    }
}

/// Reference point the predicted means are expressed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Means are emitted directly in the input frame.
    None,
    /// Means are offsets from the constant-velocity extrapolation of each
    /// agent's last two valid observations.
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub kernel_size: usize,
    pub filters: Vec<usize>,
    pub convs_per_block: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub n_max: usize,
    #[serde(default = "default_anchor")]
    pub anchor: Anchor,
}

fn default_anchor() -> Anchor {
    Anchor::ConstantVelocity
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(Variant::IaTcnn)
    }
}

impl ModelConfig {
    pub fn paper(variant: Variant) -> Self {
        ModelConfig {
            variant,
            kernel_size: 30,
            filters: vec![128, 128, 128],
            convs_per_block: 1,
            t_obs: 8,
            t_pred: 12,
            n_max: 32,
            anchor: Anchor::ConstantVelocity,
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            kernel_size: 8,
            filters: vec![24, 24, 24],
            ..Self::paper(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.filters.len() != 3 {
            return bad(format!("exactly 3 blocks required, got {} filter sizes", self.filters.len()));
        }
        if self.filters.contains(&0) {
            return bad("filter sizes must be positive".into());
        }
        if self.kernel_size == 0 || self.convs_per_block == 0 {
            return bad("kernel_size and convs_per_block must be positive".into());
        }
        if self.t_obs == 0 || self.t_pred == 0 || self.n_max == 0 {
            return bad("t_obs, t_pred and n_max must be positive".into());
        }
        if self.variant == Variant::IaDResTcnn && self.filters[0] != self.filters[1] {
            return bad(format!(
                "IA-DResTCNN needs an identity skip around block 2: filters[0] ({}) must equal filters[1] ({})",
                self.filters[0], self.filters[1]
            ));
        }
        Ok(())
    }

    pub fn effective_convs_per_block(&self) -> usize {
        match self.variant {
            Variant::IaLinConv => 1,
            _ => self.convs_per_block,
        }
    }

    /// Dilation of every convolution, grouped by block. The rate grows by
    /// one per convolution across the whole stack, or stays 1 for
    /// IA-LinConv.
    pub fn dilations(&self) -> Vec<Vec<usize>> {
        let n = self.effective_convs_per_block();
        (0..3)
            .map(|b| {
                (0..n)
                    .map(|j| match self.variant {
                        Variant::IaLinConv => 1,
                        _ => b * n + j + 1,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn is_residual_block(&self, block: usize) -> bool {
        self.variant == Variant::IaDResTcnn && block == 1
    }

    /// Closed-form trainable scalar count (loss weights excluded).
    pub fn parameter_count(&self) -> usize {
        let n = self.effective_convs_per_block();
        let k = self.kernel_size;
        let mut total = 0;
        let mut c_prev = FEATURES;
        for &c in &self.filters {
            for j in 0..n {
                let c_in = if j == 0 { 2 * c_prev } else { c };
                total += c_in * c * k + c;
            }
            c_prev = c;
        }
        total + c_prev * HEAD_WIDTH + HEAD_WIDTH + c_prev + 1
    }
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<Vec<(ParamId, ParamId)>>,
    head: (ParamId, ParamId),
    mask_head: (ParamId, ParamId),
    s_p: ParamId,
    s_gamma: ParamId,
    s_m: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_v: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_v: f64,
    pub rho: f64,
}

/// Forward output as plain values; every tensor is indexed `[agent, step, ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    /// `[N, T_pred, 3]`: μx, μy, μv.
    pub mu: Tensor,
    /// `[N, T_pred, 3]`: σx, σy, σv.
    pub sigma: Tensor,
    /// `[N, T_pred]`.
    pub rho: Tensor,
    /// `[N, T_pred, 2]`: unit (qw, qz).
    pub quat: Tensor,
    /// `[N, T_pred]` sigmoid outputs.
    pub mask_prob: Tensor,
}

impl PredictionBatch {
    pub fn n_agents(&self) -> usize {
        self.rho.shape()[0]
    }

    pub fn t_pred(&self) -> usize {
        self.rho.shape()[1]
    }

    pub fn gaussian(&self, agent: usize, t: usize) -> GaussianParams {
        let o = (agent * self.t_pred() + t) * 3;
        let (m, s) = (self.mu.data(), self.sigma.data());
        GaussianParams {
            mu_x: m[o],
            mu_y: m[o + 1],
            mu_v: m[o + 2],
            sigma_x: s[o],
            sigma_y: s[o + 1],
            sigma_v: s[o + 2],
            rho: self.rho.data()[agent * self.t_pred() + t],
        }
    }

    pub fn predicted_mask(&self) -> Vec<bool> {
        self.mask_prob.data().iter().map(|&p| p >= 0.5).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointEstimate {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub yaw_deg: f64,
}

/// Gaussian means and quaternion yaw, one trajectory per agent row.
pub fn predict_points(pred: &PredictionBatch) -> Vec<Vec<PointEstimate>> {
    (0..pred.n_agents())
        .map(|a| {
            (0..pred.t_pred())
                .map(|t| {
                    let g = pred.gaussian(a, t);
                    let q = &pred.quat.data()[(a * pred.t_pred() + t) * 2..][..2];
                    PointEstimate {
                        x: g.mu_x,
                        y: g.mu_y,
                        v: g.mu_v,
                        yaw_deg: (2.0 * q[1].atan2(q[0])).to_degrees(),
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub s_p: f64,
    pub s_gamma: f64,
    pub s_m: f64,
}

/// Loss components; `total` is the weighted objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub positional: f64,
    pub rotational: f64,
    pub mask: f64,
}

/// Graph handles of one forward pass, rows ordered `(agent, step)`.
#[derive(Clone, Copy, Debug)]
pub struct PredVars {
    /// `[M, 3]`
    pub mu: Var,
    /// `[M, 3]`
    pub log_sigma: Var,
    /// `[M, 3]`
    pub sigma: Var,
    /// `[M, 1]`
    pub rho: Var,
    /// `[M, 2]`
    pub quat: Var,
    /// `[M, 1]`
    pub mask_logit: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub positional: Var,
    pub rotational: Var,
    pub mask: Var,
}

/// Flattened, masked targets for a set of windows.
struct TargetConst {
    xyv: Tensor,
    quat: Tensor,
    mask: Tensor,
}

impl TargetConst {
    fn from_batches(targets: &[&TargetBatch]) -> Self {
        let rows: usize = targets.iter().map(|t| t.n_agents() * t.len()).sum();
        let mut xyv = Vec::with_capacity(rows * 3);
        let mut quat = Vec::with_capacity(rows * 2);
        let mut mask = Vec::with_capacity(rows);
        for tb in targets {
            for (f, &m) in tb.features.data().chunks(FEATURES).zip(tb.mask.data()) {
                xyv.extend([f[0] * m, f[1] * m, f[2] * m]);
                quat.extend([f[3] * m, f[4] * m]);
                mask.push(m);
            }
        }
        TargetConst {
            xyv: Tensor::new(vec![rows, 3], xyv).expect("sized"),
            quat: Tensor::new(vec![rows, 2], quat).expect("sized"),
            mask: Tensor::new(vec![rows, 1], mask).expect("sized"),
        }
    }
}

/// Builds the weighted multi-task objective on the graph. `weights` are
/// `(s_p, s_γ, s_m)` handles of shape `[1]`.
fn loss_from_targets(g: &mut Graph<'_>, p: &PredVars, tgt: TargetConst, weights: (Var, Var, Var)) -> Result<LossVars> {
    let rows = tgt.mask.shape()[0];
    let n_valid = tgt.mask.sum().max(1.0);
    let mask = g.constant(tgt.mask);
    let txyv = g.constant(tgt.xyv);
    let tq = g.constant(tgt.quat);

    let d = g.sub(txyv, p.mu)?;
    let z = g.div(d, p.sigma)?;
    let col = |g: &mut Graph<'_>, v: Var, i: usize| g.slice(v, 1, i, 1);
    let (zx, zy, zv) = (col(g, z, 0)?, col(g, z, 1)?, col(g, z, 2)?);
    let ls_sum = g.sum_axis(p.log_sigma, 1)?;

    let rho2 = g.square(p.rho);
    let neg_rho2 = g.neg(rho2);
    let one_minus = g.add_scalar(neg_rho2, 1.0);
    let zx2 = g.square(zx);
    let zy2 = g.square(zy);
    let zxy = g.mul(zx, zy)?;
    let rzxy = g.mul(p.rho, zxy)?;
    let cross = g.scale(rzxy, -2.0);
    let q0 = g.add(zx2, zy2)?;
    let q = g.add(q0, cross)?;
    let two_om = g.scale(one_minus, 2.0);
    let quad = g.div(q, two_om)?;
    let log_om = g.log(one_minus);
    let half_log_om = g.scale(log_om, 0.5);
    let zv2 = g.square(zv);
    let half_zv2 = g.scale(zv2, 0.5);

    let mut nll = g.add(ls_sum, quad)?;
    nll = g.add(nll, half_log_om)?;
    nll = g.add(nll, half_zv2)?;
    nll = g.add_scalar(nll, 1.5 * LN_2PI);
    let masked_nll = g.mul(nll, mask)?;
    let nll_sum = g.sum(masked_nll);
    let positional = g.scale(nll_sum, 1.0 / n_valid);

    let dq = g.sub(tq, p.quat)?;
    let qerr = g.norm_last(dq);
    let qerr = g.reshape(qerr, &[rows, 1])?;
    let masked_q = g.mul(qerr, mask)?;
    let q_sum = g.sum(masked_q);
    let rotational = g.scale(q_sum, 1.0 / n_valid);

    // binary cross-entropy with logits: softplus(l) − y·l
    let sp = g.softplus(p.mask_logit);
    let yl = g.mul(mask, p.mask_logit)?;
    let bce = g.sub(sp, yl)?;
    let mask_loss = g.mean(bce);

    let mut total = None;
    for (l, s) in [(positional, weights.0), (rotational, weights.1), (mask_loss, weights.2)] {
        let term = weighted_term(g, l, s)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(LossVars {
        total: total.expect("three terms"),
        positional,
        rotational,
        mask: mask_loss,
    })
}

/// `L·exp(−s) + s` for scalar handles.
pub fn weighted_term(g: &mut Graph<'_>, l: Var, s: Var) -> Result<Var> {
    let ns = g.neg(s);
    let e = g.exp(ns);
    let le = g.mul(l, e)?;
    g.add(le, s)
}

/// Value-level objective for an already computed prediction.
pub fn loss(pred: &PredictionBatch, target: &TargetBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    let (n, tp) = (pred.n_agents(), pred.t_pred());
    if target.mask.shape() != [n, tp] {
        return Err(Error::shape("loss", format!("target mask [{n}, {tp}]"), format!("{:?}", target.mask.shape())));
    }
    if let Some(s) = pred.sigma.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("non-positive sigma {s} reached the loss")));
    }
    if let Some(r) = pred.rho.data().iter().find(|&&r| !(r.abs() < 1.0)) {
        return Err(Error::InvalidArgument(format!("correlation {r} outside (-1, 1)")));
    }
    let m = n * tp;
    let mut g = Graph::new();
    let logits = pred.mask_prob.map(|p| {
        let p = p.clamp(0.0, 1.0);
        (p / (1.0 - p)).ln().clamp(-MAX_MASK_LOGIT, MAX_MASK_LOGIT)
    });
    let vars = PredVars {
        mu: g.constant(pred.mu.clone().reshape(&[m, 3])?),
        log_sigma: g.constant(pred.sigma.map(f64::ln).reshape(&[m, 3])?),
        sigma: g.constant(pred.sigma.clone().reshape(&[m, 3])?),
        rho: g.constant(pred.rho.clone().reshape(&[m, 1])?),
        quat: g.constant(pred.quat.clone().reshape(&[m, 2])?),
        mask_logit: g.constant(logits.reshape(&[m, 1])?),
    };
    let w = (
        g.constant(Tensor::scalar(weights.s_p)),
        g.constant(Tensor::scalar(weights.s_gamma)),
        g.constant(Tensor::scalar(weights.s_m)),
    );
    let lv = loss_from_targets(&mut g, &vars, TargetConst::from_batches(&[target]), w)?;
    Ok(LossBreakdown {
        total: g.value(lv.total).item(),
        positional: g.value(lv.positional).item(),
        rotational: g.value(lv.rotational).item(),
        mask: g.value(lv.mask).item(),
    })
}

/// Forward handles plus the per-block activations `[rows, C, T_obs + T_pred]`.
pub struct ForwardVars {
    pub pred: PredVars,
    pub activations: Vec<Var>,
    pub rows: usize,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = config.kernel_size;
        let n = config.effective_convs_per_block();
        let mut convs = Vec::new();
        let mut c_prev = FEATURES;
        for (b, &c) in config.filters.iter().enumerate() {
            let mut block = Vec::new();
            for j in 0..n {
                let c_in = if j == 0 { 2 * c_prev } else { c };
                let w = params.add(
                    format!("block{b}.conv{j}.weight"),
                    Tensor::glorot(&[c, c_in, k], c_in * k, c * k, &mut rng),
                );
                let bias = params.add(format!("block{b}.conv{j}.bias"), Tensor::zeros(&[c]));
                block.push((w, bias));
            }
            convs.push(block);
            c_prev = c;
        }
        let mut head_w = Tensor::glorot(&[HEAD_WIDTH, c_prev], c_prev, HEAD_WIDTH, &mut rng);
        // a quiet start keeps the first predictions near the anchor
        head_w.scale_in_place(0.1);
        let mut head_b = Tensor::zeros(&[HEAD_WIDTH]);
        head_b.data_mut()[7] = 1.0;
        let head = (params.add("head.weight", head_w), params.add("head.bias", head_b));
        let mask_w = Tensor::glorot(&[1, c_prev], c_prev, 1, &mut rng);
        let mask_head = (params.add("mask_head.weight", mask_w), params.add("mask_head.bias", Tensor::zeros(&[1])));
        let s_p = params.add("loss.s_p", Tensor::scalar(0.0));
        let s_gamma = params.add("loss.s_gamma", Tensor::scalar(0.0));
        let s_m = params.add("loss.s_m", Tensor::scalar(0.0));
        Ok(Model {
            config,
            params,
            layout: Layout {
                convs,
                head,
                mask_head,
                s_p,
                s_gamma,
                s_m,
            },
        })
    }

    /// Network scalars, excluding the three loss weights.
    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars() - 3
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            s_p: self.params.get(self.layout.s_p).item(),
            s_gamma: self.params.get(self.layout.s_gamma).item(),
            s_m: self.params.get(self.layout.s_m).item(),
        }
    }

    pub fn loss_weight_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.layout.s_p, self.layout.s_gamma, self.layout.s_m)
    }

    /// Rebuilds a model from a config and a full set of named tensors.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Model> {
        let mut model = Model::build(config, 0)?;
        if tensors.len() != model.params.entry_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                model.params.entry_count(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            model.params.assign(&name, t)?;
        }
        Ok(model)
    }

    fn check_obs(&self, obs: &ObservationBatch) -> Result<()> {
        let n = obs.n_agents();
        obs.features.expect_shape("iatcnn forward", &[n, self.config.t_obs, FEATURES])?;
        obs.mask.expect_shape("iatcnn forward mask", &[n, self.config.t_obs])?;
        if n == 0 {
            return Err(Error::shape("iatcnn forward", "at least one agent row", 0));
        }
        Ok(())
    }

    /// Forward pass over several independent windows stacked along the row
    /// axis; agents only interact within their own window.
    pub fn forward_graph<'a>(&self, g: &mut Graph<'a>, bound: &Bound, windows: &[&ObservationBatch]) -> Result<ForwardVars> {
        if windows.is_empty() {
            return Err(Error::InvalidArgument("forward needs at least one window".into()));
        }
        for obs in windows {
            self.check_obs(obs)?;
        }
        let (t_obs, t_pred) = (self.config.t_obs, self.config.t_pred);
        let t_all = t_obs + t_pred;
        let counts: Vec<usize> = windows.iter().map(|o| o.n_agents()).collect();
        let rows: usize = counts.iter().sum();

        let mut input = Tensor::zeros(&[rows, FEATURES, t_all]);
        let mut pool = Tensor::zeros(&[rows, 1, t_all]);
        let mut anchor = Tensor::zeros(&[rows * t_pred, 3]);
        let mut r0 = 0;
        for obs in windows {
            let n = obs.n_agents();
            let activity = obs.agent_activity();
            for a in 0..n {
                for t in 0..t_obs {
                    let m = obs.mask.data()[a * t_obs + t];
                    for (f, v) in obs.slot(a, t).iter().enumerate() {
                        input.data_mut()[((r0 + a) * FEATURES + f) * t_all + t] = v * m;
                    }
                }
            }
            for t in 0..t_all {
                let w: Vec<f64> = (0..n)
                    .map(|a| if t < t_obs { obs.mask.data()[a * t_obs + t] } else { activity[a] })
                    .collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    for (a, wa) in w.iter().enumerate() {
                        pool.data_mut()[(r0 + a) * t_all + t] = wa / total;
                    }
                }
            }
            if self.config.anchor == Anchor::ConstantVelocity {
                let cv = constant_velocity_forecast(obs, t_pred);
                anchor.data_mut()[r0 * t_pred * 3..(r0 + n) * t_pred * 3].copy_from_slice(cv.data());
            }
            r0 += n;
        }

        let mut h = g.constant(input);
        let pool = g.constant(pool);
        let dil = self.config.dilations();
        let mut activations = Vec::with_capacity(3);
        for (b, block) in self.layout.convs.iter().enumerate() {
            let block_in = h;
            let c = g.shape(h)[1];
            let pw = g.broadcast_to(pool, &[rows, c, t_all])?;
            let weighted = g.mul(h, pw)?;
            let mut pooled_parts = Vec::with_capacity(windows.len());
            let mut start = 0;
            for &n in &counts {
                let part = g.slice(weighted, 0, start, n)?;
                let s = g.sum_axis(part, 0)?;
                pooled_parts.push(g.broadcast_to(s, &[n, c, t_all])?);
                start += n;
            }
            let pooled = if pooled_parts.len() == 1 { pooled_parts[0] } else { g.concat(&pooled_parts, 0)? };
            let mut x = g.concat(&[h, pooled], 1)?;
            for (j, &(w, bias)) in block.iter().enumerate() {
                x = g.causal_conv1d(x, bound[w], Some(bound[bias]), dil[b][j])?;
            }
            h = if self.config.is_residual_block(b) {
                let sum = g.add(x, block_in)?;
                g.relu(sum)
            } else {
                g.tanh(x)
            };
            activations.push(h);
        }

        let c = g.shape(h)[1];
        let cropped = g.slice(h, 2, t_obs, t_pred)?;
        let per_step = g.permute(cropped, &[0, 2, 1])?;
        let flat = g.reshape(per_step, &[rows * t_pred, c])?;
        let raw = g.dense(flat, bound[self.layout.head.0], Some(bound[self.layout.head.1]))?;
        let mask_logit = g.dense(flat, bound[self.layout.mask_head.0], Some(bound[self.layout.mask_head.1]))?;
        let mu_raw = g.slice(raw, 1, 0, 3)?;
        let mu = match self.config.anchor {
            Anchor::None => mu_raw,
            Anchor::ConstantVelocity => {
                let a = g.constant(anchor);
                g.add(mu_raw, a)?
            }
        };
        let log_sigma = g.slice(raw, 1, 3, 3)?;
        let sigma = g.exp(log_sigma);
        let rho_raw = g.slice(raw, 1, 6, 1)?;
        let rho = g.tanh(rho_raw);
        let q_raw = g.slice(raw, 1, 7, 2)?;
        let quat = g.normalize_last(q_raw);
        Ok(ForwardVars {
            pred: PredVars { mu, log_sigma, sigma, rho, quat, mask_logit },
            activations,
            rows,
        })
    }

    fn weights_vars(&self, bound: &Bound) -> (Var, Var, Var) {
        (bound[self.layout.s_p], bound[self.layout.s_gamma], bound[self.layout.s_m])
    }

    /// Objective on the graph for stacked windows.
    pub fn loss_graph(&self, g: &mut Graph<'_>, bound: &Bound, fv: &ForwardVars, targets: &[&TargetBatch]) -> Result<LossVars> {
        let tp = self.config.t_pred;
        let rows: usize = targets.iter().map(|t| t.n_agents()).sum();
        if rows != fv.rows {
            return Err(Error::shape("iatcnn loss", format!("{} target rows", fv.rows), rows));
        }
        for t in targets {
            t.mask.expect_shape("iatcnn loss target mask", &[t.n_agents(), tp])?;
        }
        loss_from_targets(g, &fv.pred, TargetConst::from_batches(targets), self.weights_vars(bound))
    }

    pub fn forward(&self, obs: &ObservationBatch) -> Result<PredictionBatch> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let fv = self.forward_graph(&mut g, &bound, &[obs])?;
        Ok(self.collect_prediction(&g, &fv, obs.n_agents()))
    }

    /// Block activations `[N, C, T_obs + T_pred]` of a forward pass.
    pub fn activations(&self, obs: &ObservationBatch) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let fv = self.forward_graph(&mut g, &bound, &[obs])?;
        Ok(fv.activations.iter().map(|&v| g.value(v).clone()).collect())
    }

    fn collect_prediction(&self, g: &Graph<'_>, fv: &ForwardVars, n: usize) -> PredictionBatch {
        let tp = self.config.t_pred;
        let take = |v: Var, shape: &[usize]| g.value(v).clone().reshape(shape).expect("row count");
        PredictionBatch {
            mu: take(fv.pred.mu, &[n, tp, 3]),
            sigma: take(fv.pred.sigma, &[n, tp, 3]),
            rho: take(fv.pred.rho, &[n, tp]),
            quat: take(fv.pred.quat, &[n, tp, 2]),
            mask_prob: g.value(fv.pred.mask_logit).map(sigmoid).reshape(&[n, tp]).expect("row count"),
        }
    }

    /// Objective and gradients (store order) for stacked windows.
    pub fn loss_and_grads(&self, batch: &[(&ObservationBatch, &TargetBatch)]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let obs: Vec<&ObservationBatch> = batch.iter().map(|b| b.0).collect();
        let tgt: Vec<&TargetBatch> = batch.iter().map(|b| b.1).collect();
        let fv = self.forward_graph(&mut g, &bound, &obs)?;
        let lv = self.loss_graph(&mut g, &bound, &fv, &tgt)?;
        let grads = g.backward(lv.total)?;
        Ok((breakdown(&g, &lv), self.params.collect_grads(&grads, &bound)))
    }

    pub fn batch_loss(&self, batch: &[(&ObservationBatch, &TargetBatch)]) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let obs: Vec<&ObservationBatch> = batch.iter().map(|b| b.0).collect();
        let tgt: Vec<&TargetBatch> = batch.iter().map(|b| b.1).collect();
        let fv = self.forward_graph(&mut g, &bound, &obs)?;
        let lv = self.loss_graph(&mut g, &bound, &fv, &tgt)?;
        Ok(breakdown(&g, &lv))
    }
}

pub fn breakdown(g: &Graph<'_>, lv: &LossVars) -> LossBreakdown {
    LossBreakdown {
        total: g.value(lv.total).item(),
        positional: g.value(lv.positional).item(),
        rotational: g.value(lv.rotational).item(),
        mask: g.value(lv.mask).item(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            epochs: 100,
            batch_size: 12,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shorter schedule with a larger step size for the desk model.
    pub fn desk() -> Self {
        TrainConfig { lr: 2e-3, epochs: 20, ..Self::default() }
    }
}

/// Drops padding rows (keeping at least one) so training does not spend
/// compute on empty slots.
pub fn compact_window(obs: &ObservationBatch, target: &TargetBatch) -> (ObservationBatch, TargetBatch) {
    let keep: Vec<usize> = (0..obs.n_agents()).filter(|&a| obs.agent_ids[a].is_some()).collect();
    let keep = if keep.is_empty() { vec![0] } else { keep };
    (select_rows(obs, &keep), select_rows(target, &keep))
}

pub fn select_rows(b: &ObservationBatch, rows: &[usize]) -> ObservationBatch {
    let t = b.len();
    let mut out = ObservationBatch::zeros(rows.len(), t, b.start_frame);
    for (i, &r) in rows.iter().enumerate() {
        out.features.data_mut()[i * t * FEATURES..(i + 1) * t * FEATURES]
            .copy_from_slice(&b.features.data()[r * t * FEATURES..(r + 1) * t * FEATURES]);
        out.mask.data_mut()[i * t..(i + 1) * t].copy_from_slice(&b.mask.data()[r * t..(r + 1) * t]);
        out.agent_ids[i] = b.agent_ids[r];
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Adam with global-norm clipping over shuffled minibatches of windows.
pub fn train(model: &mut Model, data: &[(ObservationBatch, TargetBatch)], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &[(ObservationBatch, TargetBatch)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("trajectory windows"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let compact: Vec<(ObservationBatch, TargetBatch)> = data.iter().map(|(o, t)| compact_window(o, t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::adam(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..compact.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&ObservationBatch, &TargetBatch)> = chunk.iter().map(|&i| (&compact[i].0, &compact[i].1)).collect();
            let (lb, mut grads) = model.loss_and_grads(&batch)?;
            if !lb.total.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}")));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let mut ps: Vec<&mut Tensor> = model.params.tensors_mut().collect();
            opt.step(&mut ps, &grads)?;
            sum += lb.total;
            batches += 1;
        }
        let mean = sum / batches as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainReport {
        epoch_loss: history,
        steps: opt.steps(),
    })
}

/// Pooled scores of the Gaussian means over every valid target slot.
pub fn evaluate(model: &Model, windows: &[(ObservationBatch, TargetBatch)]) -> Result<TrajectoryScore> {
    let preds = par::map_slice(windows, |(o, _)| model.forward(o));
    let mut acc = TrajectoryAccumulator::default();
    for (p, (_, t)) in preds.into_iter().zip(windows) {
        let pts = PointSet::from_estimates(&predict_points(&p?));
        acc.add(&pts, &PointSet::from_batch(t), &valid_mask(t))?;
    }
    acc.finish()
}

pub fn valid_mask(target: &TargetBatch) -> Vec<bool> {
    target.mask.data().iter().map(|&m| m > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AgentBatch;
    use rand::Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            kernel_size: 3,
            filters: vec![4, 4, 3],
            convs_per_block: 2,
            t_obs: 4,
            t_pred: 3,
            n_max: 3,
            anchor: Anchor::ConstantVelocity,
        }
    }

    fn random_obs(n: usize, t: usize, seed: u64) -> AgentBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = AgentBatch::zeros(n, t, 0);
        for a in 0..n {
            b.agent_ids[a] = Some(a as u64);
            for k in 0..t {
                let yaw: f64 = rng.gen_range(-3.0..3.0);
                b.features.data_mut()[(a * t + k) * 5..][..5].copy_from_slice(&[
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..2.0),
                    (yaw / 2.0).cos(),
                    (yaw / 2.0).sin(),
                ]);
                b.mask.data_mut()[a * t + k] = 1.0;
            }
        }
        b
    }

    #[test]
    fn linconv_has_one_undilated_conv_per_block() {
        let cfg = ModelConfig { convs_per_block: 3, ..tiny(Variant::IaLinConv) };
        assert_eq!(cfg.dilations(), vec![vec![1], vec![1], vec![1]]);
        let m = Model::build(cfg, 0).unwrap();
        assert_eq!(m.layout.convs.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1, 1]);
    }

    #[test]
    fn default_dilations_grow_per_conv() {
        assert_eq!(ModelConfig::default().dilations(), vec![vec![1], vec![2], vec![3]]);
        assert_eq!(tiny(Variant::IaTcnn).dilations(), vec![vec![1, 2], vec![3, 4], vec![5, 6]]);
    }

    #[test]
    fn default_parameter_count_matches_layer_sum() {
        let m = Model::build(ModelConfig::default(), 1).unwrap();
        // blocks see their own channels plus the pooled copy
        let convs = (10 * 128 * 30 + 128) + 2 * (256 * 128 * 30 + 128);
        let heads = 128 * 9 + 9 + 128 + 1;
        assert_eq!(m.parameter_count(), convs + heads);
        assert_eq!(m.config.parameter_count(), convs + heads);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(tiny(Variant::IaTcnn), 9).unwrap();
        let b = Model::build(tiny(Variant::IaTcnn), 9).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Model::build(ModelConfig { filters: vec![4, 4], ..tiny(Variant::IaTcnn) }, 0).is_err());
        assert!(Model::build(ModelConfig { filters: vec![4, 5, 4], ..tiny(Variant::IaDResTcnn) }, 0).is_err());
    }

    #[test]
    fn zero_input_gives_valid_outputs() {
        for v in Variant::ALL {
            let m = Model::build(tiny(v), 3).unwrap();
            let obs = AgentBatch::zeros(3, 4, 0);
            let p = m.forward(&obs).unwrap();
            assert!(p.mu.all_finite());
            assert!(p.sigma.data().iter().all(|&s| s > 0.0));
            for q in p.quat.data().chunks(2) {
                assert!((q[0].hypot(q[1]) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_observation_length_is_a_shape_error() {
        let m = Model::build(tiny(Variant::IaTcnn), 3).unwrap();
        assert!(matches!(m.forward(&AgentBatch::zeros(3, 5, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn duplicated_rows_get_identical_outputs() {
        let m = Model::build(tiny(Variant::IaTcnn), 5).unwrap();
        let base = random_obs(2, 4, 1);
        let dup = select_rows(&base, &[0, 1, 1]);
        let p = m.forward(&dup).unwrap();
        let row = |t: &Tensor, a: usize| t.data()[a * t.len() / 3..(a + 1) * t.len() / 3].to_vec();
        for t in [&p.mu, &p.sigma, &p.rho, &p.quat, &p.mask_prob] {
            assert_eq!(row(t, 1), row(t, 2));
        }
    }

    #[test]
    fn closed_form_nll_at_the_mean() {
        let tgt = random_obs(1, 2, 4);
        let mut mu = Tensor::zeros(&[1, 2, 3]);
        let mut quat = Tensor::zeros(&[1, 2, 2]);
        for k in 0..2 {
            let s = tgt.slot(0, k);
            mu.data_mut()[k * 3..k * 3 + 3].copy_from_slice(&s[..3]);
            quat.data_mut()[k * 2..k * 2 + 2].copy_from_slice(&s[3..]);
        }
        let pred = PredictionBatch {
            mu,
            sigma: Tensor::full(&[1, 2, 3], 1.0),
            rho: Tensor::zeros(&[1, 2]),
            quat,
            mask_prob: Tensor::full(&[1, 2], 0.5),
        };
        let w = LossWeights { s_p: 0.0, s_gamma: 0.0, s_m: 0.0 };
        let l = loss(&pred, &tgt, &w).unwrap();
        assert!((l.positional - 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!(l.rotational.abs() < 1e-15);
        assert!((l.total - (l.positional + l.rotational + l.mask)).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_nonpositive_sigma() {
        let pred = PredictionBatch {
            mu: Tensor::zeros(&[1, 1, 3]),
            sigma: Tensor::from_fn(&[1, 1, 3], |i| i as f64),
            rho: Tensor::zeros(&[1, 1]),
            quat: Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(),
            mask_prob: Tensor::full(&[1, 1], 0.5),
        };
        let tgt = AgentBatch::zeros(1, 1, 0);
        assert!(loss(&pred, &tgt, &LossWeights { s_p: 0.0, s_gamma: 0.0, s_m: 0.0 }).is_err());
    }

    #[test]
    fn yaw_of_reference_quaternions() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pred = PredictionBatch {
            mu: Tensor::zeros(&[1, 3, 3]),
            sigma: Tensor::full(&[1, 3, 3], 1.0),
            rho: Tensor::zeros(&[1, 3]),
            quat: Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, h, h, 0.0, 1.0]).unwrap(),
            mask_prob: Tensor::full(&[1, 3], 0.5),
        };
        let yaws: Vec<f64> = predict_points(&pred)[0].iter().map(|p| p.yaw_deg).collect();
        assert!((yaws[0]).abs() < 1e-12);
        assert!((yaws[1] - 90.0).abs() < 1e-12);
        assert!((yaws[2] - 180.0).abs() < 1e-12);
    }

    #[test]
    fn stacked_windows_do_not_interact() {
        let m = Model::build(tiny(Variant::IaTcnn), 2).unwrap();
        let a = random_obs(2, 4, 10);
        let b = random_obs(3, 4, 11);
        let alone = m.forward(&a).unwrap();
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g);
        let fv = m.forward_graph(&mut g, &bound, &[&a, &b]).unwrap();
        let both = g.value(fv.pred.mu).data()[..2 * 3 * 3].to_vec();
        assert_eq!(both, alone.mu.data());
    }

    #[test]
    fn training_is_deterministic_and_learns_a_straight_walker() {
        let mut data = Vec::new();
        for s in 0..6 {
            let mut obs = AgentBatch::zeros(1, 4, 0);
            let mut tgt = AgentBatch::zeros(1, 3, 4);
            obs.agent_ids[0] = Some(0);
            tgt.agent_ids[0] = Some(0);
            for k in 0..7 {
                let f = [0.5 * k as f64 + s as f64, 0.1 * s as f64, 0.5, 1.0, 0.0];
                let b = if k < 4 { &mut obs } else { &mut tgt };
                let t = if k < 4 { k } else { k - 4 };
                b.features.data_mut()[t * 5..t * 5 + 5].copy_from_slice(&f);
                b.mask.data_mut()[t] = 1.0;
            }
            data.push((obs, tgt));
        }
        let cfg = TrainConfig { lr: 1e-2, epochs: 40, batch_size: 3, clip_norm: 10.0, seed: 4 };
        let run = || {
            let mut m = Model::build(tiny(Variant::IaTcnn), 8).unwrap();
            let r = train(&mut m, &data, &cfg).unwrap();
            (m, r)
        };
        let (m, r1) = run();
        let (_, r2) = run();
        assert_eq!(r1.epoch_loss, r2.epoch_loss);
        assert!(r1.epoch_loss.last().unwrap() < &(0.5 * r1.epoch_loss[0]));
        let p = m.forward(&data[0].0).unwrap();
        let pts = &predict_points(&p)[0];
        let ade: f64 = pts
            .iter()
            .enumerate()
            .map(|(k, pt)| (pt.x - data[0].1.slot(0, k)[0]).hypot(pt.y - data[0].1.slot(0, k)[1]))
            .sum::<f64>()
            / 3.0;
        assert!(ade < 0.05, "ade {ade}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut m = Model::build(tiny(Variant::IaTcnn), 0).unwrap();
        assert!(matches!(train(&mut m, &[], &TrainConfig::default()), Err(Error::EmptyDataset(_))));
    }
}
