//! Central finite-difference checks of every differentiable graph operation
//! and of the full models at toy scale.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenet::{AtteNet, AtteNetConfig, Mode};
use crate::data::{window_scene, ObservationBatch, TargetBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{Arcp, FusionConfig, FusionVariant};
use crate::graph::{Graph, Var};
use crate::iatcnn::{Model, ModelConfig, Variant};
use crate::synth::{gen_intersection, gen_social_forces, IntersectionConfig, SFParams};
use crate::tensor::Tensor;

/// Denominator floor: gradients whose norms are both below this compare
/// in absolute terms.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub cases_per_op: usize,
    pub model_cases: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            cases_per_op: 100,
            model_cases: 2,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

type Build = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>;

/// One operation instance: its inputs and how to apply it.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.05, 2)` and a random sign, clear of kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

fn rand_shape(rng: &mut ChaCha8Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = rng.gen_range(min_rank..=max_rank);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, f: fn(&mut Graph<'_>, Var) -> Var) -> OpCase {
    let _ = rng;
    OpCase { inputs: vec![x], build: Box::new(move |g, v| Ok(f(g, v[0]))) }
}

fn binary(rng: &mut ChaCha8Rng, b_lo: f64, f: fn(&mut Graph<'_>, Var, Var) -> Result<Var>) -> OpCase {
    let s = rand_shape(rng, 1, 3);
    let a = rand_tensor(rng, &s, -2.0, 2.0);
    let b = if b_lo > 0.0 {
        Tensor::from_fn(&s, |_| {
            let m = rng.gen_range(b_lo..2.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    } else {
        rand_tensor(rng, &s, -2.0, 2.0)
    };
    OpCase { inputs: vec![a, b], build: Box::new(move |g, v| f(g, v[0], v[1])) }
}

pub type CaseGen = fn(&mut ChaCha8Rng) -> OpCase;

/// Every differentiable operation with a random-instance generator.
pub fn op_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("add", |r| binary(r, 0.0, |g, a, b| g.add(a, b))),
        ("sub", |r| binary(r, 0.0, |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(r, 0.0, |g, a, b| g.mul(a, b))),
        ("div", |r| binary(r, 0.5, |g, a, b| g.div(a, b))),
        ("neg", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.neg(v))
        }),
        ("scale", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            let c = r.gen_range(-3.0..3.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| Ok(g.scale(v[0], c))) }
        }),
        ("add_scalar", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            let c = r.gen_range(-3.0..3.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| Ok(g.add_scalar(v[0], c))) }
        }),
        ("exp", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.exp(v))
        }),
        ("log", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, 0.2, 3.0);
            unary(r, x, |g, v| g.log(v))
        }),
        ("tanh", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.tanh(v))
        }),
        ("sigmoid", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -4.0, 4.0);
            unary(r, x, |g, v| g.sigmoid(v))
        }),
        ("relu", |r| {
            let s = rand_shape(r, 1, 3);
            let x = away_from_zero(r, &s);
            unary(r, x, |g, v| g.relu(v))
        }),
        ("elu", |r| {
            let s = rand_shape(r, 1, 3);
            let x = away_from_zero(r, &s);
            unary(r, x, |g, v| g.elu(v))
        }),
        ("softplus", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -4.0, 4.0);
            unary(r, x, |g, v| g.softplus(v))
        }),
        ("square", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.square(v))
        }),
        ("sum", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.sum(v))
        }),
        ("mean", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            unary(r, x, |g, v| g.mean(v))
        }),
        ("sum_axis", |r| {
            let s = rand_shape(r, 1, 3);
            let axis = r.gen_range(0..s.len());
            let x = rand_tensor(r, &s, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.sum_axis(v[0], axis)) }
        }),
        ("broadcast_to", |r| {
            let target = rand_shape(r, 1, 3);
            let src: Vec<usize> = target.iter().map(|&d| if r.gen_bool(0.5) { 1 } else { d }).collect();
            let x = rand_tensor(r, &src, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.broadcast_to(v[0], &target)) }
        }),
        ("reshape", |r| {
            let s = rand_shape(r, 2, 3);
            let n: usize = s.iter().product();
            let x = rand_tensor(r, &s, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.reshape(v[0], &[n])) }
        }),
        ("permute", |r| {
            use rand::seq::SliceRandom;
            let s = rand_shape(r, 2, 4);
            let mut perm: Vec<usize> = (0..s.len()).collect();
            perm.shuffle(r);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.permute(v[0], &perm)) }
        }),
        ("concat", |r| {
            let s = rand_shape(r, 1, 3);
            let axis = r.gen_range(0..s.len());
            let parts = r.gen_range(2..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut p = s.clone();
                    p[axis] = r.gen_range(1..=3);
                    rand_tensor(r, &p, -2.0, 2.0)
                })
                .collect();
            OpCase { inputs, build: Box::new(move |g, v| g.concat(v, axis)) }
        }),
        ("slice", |r| {
            let mut s = rand_shape(r, 1, 3);
            let axis = r.gen_range(0..s.len());
            s[axis] += 1;
            let start = r.gen_range(0..s[axis]);
            let len = r.gen_range(1..=s[axis] - start);
            let x = rand_tensor(r, &s, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.slice(v[0], axis, start, len)) }
        }),
        ("normalize_last", |r| {
            let s = rand_shape(r, 1, 3);
            let x = away_from_zero(r, &s);
            unary(r, x, |g, v| g.normalize_last(v))
        }),
        ("norm_last", |r| {
            let s = rand_shape(r, 1, 3);
            let x = away_from_zero(r, &s);
            unary(r, x, |g, v| g.norm_last(v))
        }),
        ("softmax", |r| {
            let s = rand_shape(r, 1, 3);
            let x = rand_tensor(r, &s, -3.0, 3.0);
            unary(r, x, |g, v| g.softmax(v))
        }),
        ("causal_conv1d", |r| {
            let (b, c, o, t, k) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..4));
            let dilation = r.gen_range(1..4);
            let bias = r.gen_bool(0.5);
            let mut inputs = vec![rand_tensor(r, &[b, c, t], -2.0, 2.0), rand_tensor(r, &[o, c, k], -1.0, 1.0)];
            if bias {
                inputs.push(rand_tensor(r, &[o], -1.0, 1.0));
            }
            OpCase { inputs, build: Box::new(move |g, v| g.causal_conv1d(v[0], v[1], v.get(2).copied(), dilation)) }
        }),
        ("conv2d", |r| {
            let k = [1, 3][r.gen_range(0..2)];
            let (b, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (h, w) = (r.gen_range(k..6), r.gen_range(k..6));
            let stride = r.gen_range(1..3);
            let pad = if k == 3 { r.gen_range(0..2) } else { 0 };
            let bias = r.gen_bool(0.5);
            let mut inputs = vec![rand_tensor(r, &[b, c, h, w], -2.0, 2.0), rand_tensor(r, &[o, c, k, k], -1.0, 1.0)];
            if bias {
                inputs.push(rand_tensor(r, &[o], -1.0, 1.0));
            }
            OpCase { inputs, build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)) }
        }),
        ("dense", |r| {
            let (b, i, o) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..5));
            let bias = r.gen_bool(0.5);
            let mut inputs = vec![rand_tensor(r, &[b, i], -2.0, 2.0), rand_tensor(r, &[o, i], -1.0, 1.0)];
            if bias {
                inputs.push(rand_tensor(r, &[o], -1.0, 1.0));
            }
            OpCase { inputs, build: Box::new(move |g, v| g.dense(v[0], v[1], v.get(2).copied())) }
        }),
        ("global_avg_pool", |r| {
            let s = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
            let x = rand_tensor(r, &s, -2.0, 2.0);
            OpCase { inputs: vec![x], build: Box::new(|g, v| g.global_avg_pool(v[0])) }
        }),
        ("batch_norm_train", |r| batch_norm_case(r, true)),
        ("batch_norm_infer", |r| batch_norm_case(r, false)),
        ("softmax_cross_entropy", |r| {
            let (b, k) = (r.gen_range(1..5), r.gen_range(2..5));
            let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
            let x = rand_tensor(r, &[b, k], -3.0, 3.0);
            OpCase { inputs: vec![x], build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)) }
        }),
    ]
}

fn batch_norm_case(r: &mut ChaCha8Rng, train: bool) -> OpCase {
    let (b, c) = (r.gen_range(2..4), r.gen_range(1..4));
    let spatial: Vec<usize> = if r.gen_bool(0.5) { vec![r.gen_range(1..3), r.gen_range(1..3)] } else { vec![] };
    let mut shape = vec![b, c];
    shape.extend(spatial);
    let x = rand_tensor(r, &shape, -2.0, 2.0);
    let gamma = rand_tensor(r, &[c], 0.5, 1.5);
    let beta = rand_tensor(r, &[c], -0.5, 0.5);
    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    OpCase {
        inputs: vec![x, gamma, beta],
        build: Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], (&mean, &var), train)?.0)),
    }
}

/// Random linear read-out so every output element is checked.
fn eval_case(case: &OpCase, inputs: &[Tensor], proj: Option<&Tensor>) -> Result<(f64, Tensor, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let Some(p) = proj else {
        return Ok((0.0, Tensor::zeros(&shape), None));
    };
    let pv = g.constant(p.clone());
    let prod = g.mul(out, pv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let gs = vars.iter().zip(inputs).map(|(&v, t)| grads.wrt_or_zeros(v, t)).collect();
    Ok((g.value(loss).item(), Tensor::zeros(&shape), Some(gs)))
}

fn loss_only(case: &OpCase, inputs: &[Tensor], proj: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let pv = g.constant(proj.clone());
    let prod = g.mul(out, pv)?;
    let loss = g.sum(prod);
    Ok(g.value(loss).item())
}

/// Largest per-input relative error for one operation instance.
pub fn check_case(case: &OpCase, rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let (_, out_shape, _) = eval_case(case, &case.inputs, None)?;
    let proj = rand_tensor(rng, out_shape.shape(), -1.0, 1.0);
    let (_, _, analytic) = eval_case(case, &case.inputs, Some(&proj))?;
    let analytic = analytic.expect("projection given");
    let mut inputs = case.inputs.clone();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let up = loss_only(case, &inputs, &proj)?;
            inputs[i].data_mut()[j] = orig - h;
            let down = loss_only(case, &inputs, &proj)?;
            inputs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_error(analytic[i].data(), &numeric));
    }
    Ok(worst)
}

/// Checks a whole model: `tensors` exposes its parameters in gradient order.
pub fn check_model<M: Clone>(
    model: &M,
    tensors: fn(&mut M) -> Vec<&mut Tensor>,
    analytic: &[Tensor],
    loss: impl Fn(&M) -> Result<f64>,
    h: f64,
) -> Result<f64> {
    let mut m = model.clone();
    let count = tensors(&mut m).len();
    if count != analytic.len() {
        return Err(Error::shape("gradcheck", format!("{count} gradients"), analytic.len()));
    }
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let len = analytic[i].len();
        let mut numeric = vec![0.0; len];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let orig = tensors(&mut m)[i].data()[j];
            tensors(&mut m)[i].data_mut()[j] = orig + h;
            let up = loss(&m)?;
            tensors(&mut m)[i].data_mut()[j] = orig - h;
            let down = loss(&m)?;
            tensors(&mut m)[i].data_mut()[j] = orig;
            *nj = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_error(analytic[i].data(), &numeric));
    }
    Ok(worst)
}

fn toy_windows(seed: u64, spec: &WindowSpec) -> Result<Vec<(ObservationBatch, TargetBatch)>> {
    let p = SFParams::default();
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < 2 {
        let scene = gen_social_forces(3, spec.span() + 3, &p, s)?;
        out.extend(window_scene(&scene, spec)?);
        s += 1_000_003;
    }
    out.truncate(2);
    Ok(out)
}

fn iatcnn_case(variant: Variant, seed: u64, h: f64) -> Result<f64> {
    let spec = WindowSpec { t_obs: 4, t_pred: 3, stride: 3, n_max: 3 };
    let cfg = ModelConfig {
        kernel_size: 3,
        filters: vec![3, 3, 3],
        convs_per_block: 2,
        t_obs: 4,
        t_pred: 3,
        n_max: 3,
        ..ModelConfig::desk(variant)
    };
    let mut model = Model::build(cfg, seed)?;
    // move the loss weights off zero so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (a, b, c) = model.loss_weight_ids();
    for id in [a, b, c] {
        model.params.get_mut(id).data_mut()[0] = rng.gen_range(-0.5..0.5);
    }
    let windows = toy_windows(seed, &spec)?;
    let batch: Vec<(&ObservationBatch, &TargetBatch)> = windows.iter().map(|(o, t)| (o, t)).collect();
    let (_, grads) = model.loss_and_grads(&batch)?;
    check_model(&model, |m| m.params.tensors_mut().collect(), &grads, |m| Ok(m.batch_loss(&batch)?.total), h)
}

fn toy_attenet_config() -> AtteNetConfig {
    AtteNetConfig {
        widths: vec![4, 4, 8, 8, 8],
        units_per_stage: 1,
        se_reduction: 4,
        classes: 4,
        input_size: 8,
        dropout: 0.2,
    }
}

fn attenet_case(seed: u64, mode: Mode, h: f64) -> Result<f64> {
    let model = AtteNet::build(toy_attenet_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let (_, grads) = model.loss_and_grads(&x, &labels, mode)?;
    check_model(&model, |m| m.params.tensors_mut().collect(), &grads, |m| m.loss(&x, &labels, mode), h)
}

fn fusion_case(variant: FusionVariant, seed: u64, h: f64) -> Result<f64> {
    let spec = WindowSpec { t_obs: 3, t_pred: 2, stride: 5, n_max: 2 };
    let traj = Model::build(
        ModelConfig { kernel_size: 2, filters: vec![2, 2, 2], t_obs: 3, t_pred: 2, n_max: 2, ..ModelConfig::desk(Variant::IaTcnn) },
        seed,
    )?;
    let light = AtteNet::build(AtteNetConfig { widths: vec![4, 4, 4, 4, 8], ..toy_attenet_config() }, seed + 1)?;
    let cfg = FusionConfig { d: 8, h: 1, w: 1, c: 8, hidden: 6, variant, ..FusionConfig::default() };
    let arcp = Arcp::build(cfg, traj, light, seed + 2)?;
    let ic = IntersectionConfig { n_scenes: 3, window: spec, image_size: 16, ..IntersectionConfig::default() };
    let data = gen_intersection(&ic, seed)?;
    let refs: Vec<_> = data.iter().collect();
    let (_, [gt, gl, gh]) = arcp.loss_and_grads(&refs)?;
    if variant == FusionVariant::Ncp {
        // NCP consumes hard decisions, so only its head is differentiable
        return check_model(&arcp, |a| a.head.params.tensors_mut().collect(), &gh, |a| a.loss(&refs), h);
    }
    let grads: Vec<Tensor> = gt.into_iter().chain(gl).chain(gh).collect();
    check_model(
        &arcp,
        |a| {
            a.trajectory
                .params
                .tensors_mut()
                .chain(a.light.params.tensors_mut())
                .chain(a.head.params.tensors_mut())
                .collect()
        },
        &grads,
        |a| a.loss(&refs),
        h,
    )
}

fn record(results: &mut Vec<CheckResult>, name: &str, errors: Vec<f64>, tol: f64) {
    let max = errors.iter().copied().fold(0.0, f64::max);
    results.push(CheckResult {
        name: name.to_string(),
        cases: errors.len(),
        max_rel_error: max,
        passed: errors.iter().all(|e| *e < tol),
    });
}

/// Runs every operation check and every model check.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    for (name, gen) in op_cases() {
        let mut errors = Vec::with_capacity(cfg.cases_per_op);
        for _ in 0..cfg.cases_per_op {
            let case = gen(&mut rng);
            errors.push(check_case(&case, &mut rng, cfg.step)?);
        }
        record(&mut results, name, errors, cfg.tolerance);
    }
    let seeds: Vec<u64> = (0..cfg.model_cases as u64).map(|i| cfg.seed.wrapping_mul(31).wrapping_add(i)).collect();
    for v in Variant::ALL {
        let errors = seeds.iter().map(|&s| iatcnn_case(v, s, cfg.step)).collect::<Result<_>>()?;
        record(&mut results, &format!("model {}", v.name()), errors, cfg.tolerance);
    }
    for (mode, label) in [(Mode::Train, "train"), (Mode::Infer, "infer")] {
        let errors = seeds.iter().map(|&s| attenet_case(s, mode, cfg.step)).collect::<Result<_>>()?;
        record(&mut results, &format!("model AtteNet 8x8 ({label})"), errors, cfg.tolerance);
    }
    for v in [FusionVariant::ArcpFull, FusionVariant::ArcpMp, FusionVariant::ArcpTlr, FusionVariant::Ncp] {
        let errors = seeds.iter().map(|&s| fusion_case(v, s, cfg.step)).collect::<Result<_>>()?;
        record(&mut results, &format!("model {}", v.name()), errors, cfg.tolerance);
    }
    Ok(GradCheckReport { results, seconds: start.elapsed().as_secs_f64() })
}
