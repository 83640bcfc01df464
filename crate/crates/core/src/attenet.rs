//! Toy-scale traffic-light classifier: a 3×3 stem, five stages of
//! pre-activation bottleneck units with ELU, one squeeze-excitation block
//! (built from 1×1 convolutions) closing each stage, then BN, ELU, global
//! average pooling, dropout and a dense head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::image::LabeledImage;
use crate::labels::TrafficLightState;
use crate::metrics::{classification_report, ClassReport};
use crate::optim::{OptimizerState, SgdConfig};
use crate::params::{Bound, BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct AtteNetConfig {
    pub widths: Vec<usize>,
    pub units_per_stage: usize,
    pub se_reduction: usize,
    pub classes: usize,
    pub input_size: usize,
    pub dropout: f64,
}

impl Default for AtteNetConfig {
    fn default() -> Self {
        AtteNetConfig {
            widths: vec![16, 32, 64, 128, 256],
            units_per_stage: 1,
            se_reduction: 4,
            classes: 4,
            input_size: 32,
            dropout: 0.2,
        }
    }
}

impl AtteNetConfig {
    /// Narrower stages ending in the 32-channel map the fusion head expects.
    pub fn fusion() -> Self {
        AtteNetConfig { widths: vec![8, 16, 16, 32, 32], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.widths.len() != 5 {
            return bad(format!("five residual stages required, got {}", self.widths.len()));
        }
        if self.units_per_stage == 0 || self.se_reduction == 0 || self.input_size == 0 {
            return bad("units_per_stage, se_reduction and input_size must be positive".into());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.se_reduction != 0 || w % 4 != 0) {
            return bad(format!("stage width {w} must be divisible by 4 and by the SE reduction {}", self.se_reduction));
        }
        if TrafficLightState::classes(self.classes).is_none() {
            return bad(format!("class count must be 3 or 4, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Spatial side of the last stage's feature map.
    pub fn final_side(&self) -> usize {
        (1..5).fold(self.input_size, |s, _| if s > 1 { s.div_ceil(2) } else { s })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Clone, Debug)]
struct Unit {
    bn0: Bn,
    conv1: ParamId,
    bn1: Bn,
    conv2: ParamId,
    bn2: Bn,
    conv3: ParamId,
    projection: Option<ParamId>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Se {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: (ParamId, ParamId),
    stages: Vec<(Vec<Unit>, Se)>,
    final_bn: Bn,
    head: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct AtteNet {
    pub config: AtteNetConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Handles produced by one forward pass.
pub struct ClassifierVars {
    pub logits: Var,
    /// Output of the last residual stage, `[B, C, h, w]`.
    pub features: Var,
    /// Pooled penultimate features `[B, C]` before dropout.
    pub pooled: Var,
    bn_stats: Vec<(BufferId, BufferId, BatchStats)>,
}

fn add_bn(p: &mut ParamStore, name: &str, c: usize) -> Bn {
    Bn {
        gamma: p.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
        beta: p.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        mean: p.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        var: p.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
    }
}

fn conv_init<R: Rng>(o: usize, i: usize, k: usize, rng: &mut R) -> Tensor {
    Tensor::glorot(&[o, i, k, k], i * k * k, o * k * k, rng)
}

/// Squeeze-excitation: per-channel gates `sigmoid(W2·elu(W1·z + b1) + b2)`
/// from the spatial mean `z`, applied multiplicatively. `w1` is
/// `[C/r, C, 1, 1]` and `w2` is `[C, C/r, 1, 1]`.
pub fn se_block(g: &mut Graph<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("se_block", "[B,C,H,W]", format!("{shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let z = g.global_avg_pool(x)?;
    let z = g.reshape(z, &[b, c, 1, 1])?;
    let h = g.conv2d(z, w1, Some(b1), 1, 0)?;
    let h = g.elu(h);
    let s = g.conv2d(h, w2, Some(b2), 1, 0)?;
    let gates = g.sigmoid(s);
    let gates = g.broadcast_to(gates, &shape)?;
    g.mul(x, gates)
}

impl AtteNet {
    pub fn build(config: AtteNetConfig, seed: u64) -> Result<AtteNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w0 = config.widths[0];
        let stem = (p.add("stem.weight", conv_init(w0, 3, 3, &mut rng)), p.add("stem.bias", Tensor::zeros(&[w0])));
        let mut stages = Vec::new();
        let mut c_in = w0;
        let mut side = config.input_size;
        for (s, &c) in config.widths.iter().enumerate() {
            let mut units = Vec::new();
            for u in 0..config.units_per_stage {
                let stride = if u == 0 && s > 0 && side > 1 { 2 } else { 1 };
                if stride == 2 {
                    side = side.div_ceil(2);
                }
                let b = c / 4;
                let name = format!("stage{s}.unit{u}");
                let projection = (stride != 1 || c_in != c)
                    .then(|| p.add(format!("{name}.projection"), conv_init(c, c_in, 1, &mut rng)));
                units.push(Unit {
                    bn0: add_bn(&mut p, &format!("{name}.bn0"), c_in),
                    conv1: p.add(format!("{name}.conv1"), conv_init(b, c_in, 1, &mut rng)),
                    bn1: add_bn(&mut p, &format!("{name}.bn1"), b),
                    conv2: p.add(format!("{name}.conv2"), conv_init(b, b, 3, &mut rng)),
                    bn2: add_bn(&mut p, &format!("{name}.bn2"), b),
                    conv3: p.add(format!("{name}.conv3"), conv_init(c, b, 1, &mut rng)),
                    projection,
                    stride,
                });
                c_in = c;
            }
            let r = c / config.se_reduction;
            let se = Se {
                w1: p.add(format!("stage{s}.se.w1"), conv_init(r, c, 1, &mut rng)),
                b1: p.add(format!("stage{s}.se.b1"), Tensor::zeros(&[r])),
                w2: p.add(format!("stage{s}.se.w2"), conv_init(c, r, 1, &mut rng)),
                b2: p.add(format!("stage{s}.se.b2"), Tensor::zeros(&[c])),
            };
            stages.push((units, se));
        }
        let final_bn = add_bn(&mut p, "final_bn", c_in);
        let head = (
            p.add("head.weight", Tensor::glorot(&[config.classes, c_in], c_in, config.classes, &mut rng)),
            p.add("head.bias", Tensor::zeros(&[config.classes])),
        );
        Ok(AtteNet {
            config,
            params: p,
            layout: Layout { stem, stages, final_bn, head },
        })
    }

    pub fn from_named(config: AtteNetConfig, tensors: Vec<(String, Tensor)>) -> Result<AtteNet> {
        let mut m = AtteNet::build(config, 0)?;
        if tensors.len() != m.params.entry_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                m.params.entry_count(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            m.params.assign(&name, t)?;
        }
        Ok(m)
    }

    /// Names of every convolution weight inside residual branches.
    pub fn residual_branch_weights(&self) -> Vec<String> {
        self.layout
            .stages
            .iter()
            .flat_map(|(units, _)| units.iter())
            .flat_map(|u| [u.conv1, u.conv2, u.conv3])
            .map(|id| self.params.name(id).to_string())
            .collect()
    }

    /// Stacks images into a `[B, 3, H, W]` tensor, checking their size.
    pub fn batch_tensor(&self, images: &[&LabeledImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.width != s || img.height != s {
                return Err(Error::shape("attenet input", format!("{s}x{s}"), format!("{}x{}", img.height, img.width)));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    fn bn(&self, g: &mut Graph<'_>, bound: &Bound, x: Var, bn: &Bn, mode: Mode, stats: &mut Vec<(BufferId, BufferId, BatchStats)>) -> Result<Var> {
        let running = (self.params.buffer(bn.mean).data(), self.params.buffer(bn.var).data());
        let (y, s) = g.batch_norm(x, bound[bn.gamma], bound[bn.beta], running, mode == Mode::Train)?;
        if let Some(s) = s {
            stats.push((bn.mean, bn.var, s));
        }
        Ok(y)
    }

    fn unit(&self, g: &mut Graph<'_>, bound: &Bound, x: Var, u: &Unit, mode: Mode, stats: &mut Vec<(BufferId, BufferId, BatchStats)>) -> Result<Var> {
        let a = self.bn(g, bound, x, &u.bn0, mode, stats)?;
        let a = g.elu(a);
        let h = g.conv2d(a, bound[u.conv1], None, 1, 0)?;
        let h = self.bn(g, bound, h, &u.bn1, mode, stats)?;
        let h = g.elu(h);
        let h = g.conv2d(h, bound[u.conv2], None, u.stride, 1)?;
        let h = self.bn(g, bound, h, &u.bn2, mode, stats)?;
        let h = g.elu(h);
        let h = g.conv2d(h, bound[u.conv3], None, 1, 0)?;
        let skip = match u.projection {
            Some(w) => g.conv2d(a, bound[w], None, u.stride, 0)?,
            None => x,
        };
        g.add(skip, h)
    }

    /// Forward pass over `[B, 3, H, W]`. Dropout is applied only when a
    /// random source is given in train mode.
    pub fn forward_graph<R: Rng>(&self, g: &mut Graph<'_>, bound: &Bound, x: Var, mode: Mode, dropout_rng: Option<&mut R>) -> Result<ClassifierVars> {
        let s = self.config.input_size;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != s || xs[3] != s {
            return Err(Error::shape("attenet forward", format!("[B,3,{s},{s}]"), format!("{xs:?}")));
        }
        let mut stats = Vec::new();
        let (sw, sb) = self.layout.stem;
        let mut h = g.conv2d(x, bound[sw], Some(bound[sb]), 1, 1)?;
        for (units, se) in &self.layout.stages {
            for u in units {
                h = self.unit(g, bound, h, u, mode, &mut stats)?;
            }
            h = se_block(g, h, bound[se.w1], bound[se.b1], bound[se.w2], bound[se.b2])?;
        }
        let features = h;
        let h = self.bn(g, bound, h, &self.layout.final_bn, mode, &mut stats)?;
        let h = g.elu(h);
        let pooled = g.global_avg_pool(h)?;
        let mut z = pooled;
        if let (Mode::Train, Some(rng), true) = (mode, dropout_rng, self.config.dropout > 0.0) {
            let p = self.config.dropout;
            let shape = g.shape(pooled).to_vec();
            let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) });
            let m = g.constant(mask);
            z = g.mul(pooled, m)?;
        }
        let logits = g.dense(z, bound[self.layout.head.0], Some(bound[self.layout.head.1]))?;
        Ok(ClassifierVars { logits, features, pooled, bn_stats: stats })
    }

    /// Folds batch statistics from a train-mode pass into the running buffers.
    pub fn update_running_stats(&mut self, cv: ClassifierVars) {
        for (mean, var, s) in cv.bn_stats {
            for (r, b) in self.params.buffer_mut(mean).data_mut().iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.params.buffer_mut(var).data_mut().iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Class probabilities for each image (infer mode).
    pub fn forward_classify(&self, images: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
        let x = self.batch_tensor(images)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x);
        let cv = self.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, Mode::Infer, None)?;
        let probs = g.softmax(cv.logits);
        Ok(g.value(probs).data().chunks(self.config.classes).map(<[f64]>::to_vec).collect())
    }

    /// Last-stage feature maps `[B, C, h, w]` in infer mode.
    pub fn features(&self, images: &[&LabeledImage]) -> Result<Tensor> {
        let x = self.batch_tensor(images)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x);
        let cv = self.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, Mode::Infer, None)?;
        Ok(g.value(cv.features).clone())
    }

    /// Mean cross-entropy and its parameter gradients without dropout.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let cv = self.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, mode, None)?;
        let loss = g.softmax_cross_entropy(cv.logits, labels)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), self.params.collect_grads(&grads, &bound)))
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let cv = self.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, mode, None)?;
        let loss = g.softmax_cross_entropy(cv.logits, labels)?;
        Ok(g.value(loss).item())
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        self.layout.head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub end_lr: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            lr: 4e-3,
            momentum: 0.9,
            end_lr: 2e-4,
            power: 1.0,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierHistory {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Random square crop of side `size` for training, centre crop otherwise.
pub fn prepare(img: &LabeledImage, size: usize, rng: Option<&mut ChaCha8Rng>) -> Result<LabeledImage> {
    match rng {
        Some(r) => img.random_crop(size, r),
        None => img.center_crop(size),
    }
}

pub fn class_index(img: &LabeledImage, classes: usize) -> Result<usize> {
    img.label
        .index(classes)
        .ok_or_else(|| Error::InvalidArgument(format!("label {} not in the {classes}-class set", img.label)))
}

/// Momentum SGD with polynomial learning-rate decay on softmax cross-entropy.
pub fn train_classifier(model: &mut AtteNet, data: &[LabeledImage], cfg: &ClassifierTrainConfig) -> Result<ClassifierHistory> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("classifier images"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let classes = model.config.classes;
    let labels: Vec<usize> = data.iter().map(|i| class_index(i, classes)).collect::<Result<_>>()?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = OptimizerState::sgd(SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        end_lr: cfg.end_lr,
        power: cfg.power,
        decay_steps: steps_per_epoch * cfg.epochs as u64,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let size = model.config.input_size;
    let mut hist = ClassifierHistory { epoch_loss: Vec::new(), epoch_accuracy: Vec::new() };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let crops: Vec<LabeledImage> = chunk.iter().map(|&i| prepare(&data[i], size, Some(&mut rng))).collect::<Result<_>>()?;
            let refs: Vec<&LabeledImage> = crops.iter().collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = model.batch_tensor(&refs)?;
            let (loss, grads, cv_stats, preds) = {
                let mut g = Graph::new();
                let bound = model.params.bind(&mut g);
                let xv = g.constant(x);
                let cv = model.forward_graph(&mut g, &bound, xv, Mode::Train, Some(&mut rng))?;
                let loss = g.softmax_cross_entropy(cv.logits, &y)?;
                let preds: Vec<usize> = g.value(cv.logits).data().chunks(classes).map(argmax).collect();
                let gr = g.backward(loss)?;
                (g.value(loss).item(), model.params.collect_grads(&gr, &bound), cv, preds)
            };
            model.update_running_stats(cv_stats);
            let mut ps: Vec<&mut Tensor> = model.params.tensors_mut().collect();
            opt.step(&mut ps, &grads)?;
            loss_sum += loss * chunk.len() as f64;
            correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += chunk.len();
        }
        hist.epoch_loss.push(loss_sum / seen as f64);
        hist.epoch_accuracy.push(correct as f64 / seen as f64);
    }
    Ok(hist)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predicted class per image on centre crops.
pub fn predict_classes(model: &AtteNet, data: &[LabeledImage]) -> Result<Vec<usize>> {
    let size = model.config.input_size;
    let chunks: Vec<&[LabeledImage]> = data.chunks(32).collect();
    let per_chunk = crate::par::map_slice(&chunks, |chunk| -> Result<Vec<usize>> {
        let crops: Vec<LabeledImage> = chunk.iter().map(|i| prepare(i, size, None)).collect::<Result<_>>()?;
        let refs: Vec<&LabeledImage> = crops.iter().collect();
        Ok(model.forward_classify(&refs)?.iter().map(|p| argmax(p)).collect())
    });
    let mut out = Vec::with_capacity(data.len());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

pub fn eval_classifier(model: &AtteNet, data: &[LabeledImage]) -> Result<ClassReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("classifier images"));
    }
    let classes = model.config.classes;
    let truth: Vec<usize> = data.iter().map(|i| class_index(i, classes)).collect::<Result<_>>()?;
    let pred = predict_classes(model, data)?;
    classification_report(&pred, &truth, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softmax;

    fn tiny() -> AtteNetConfig {
        AtteNetConfig {
            widths: vec![4, 8, 8, 8, 8],
            units_per_stage: 1,
            se_reduction: 4,
            classes: 4,
            input_size: 8,
            dropout: 0.2,
        }
    }

    fn noise_image(size: usize, seed: u64) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..size * size * 3).map(|_| rng.gen::<f64>()).collect();
        LabeledImage::new(size, size, px, TrafficLightState::Red).unwrap()
    }

    #[test]
    fn config_checks() {
        assert!(AtteNet::build(AtteNetConfig { widths: vec![4; 4], ..tiny() }, 0).is_err());
        assert!(AtteNet::build(AtteNetConfig { se_reduction: 3, ..tiny() }, 0).is_err());
        let three = AtteNet::build(AtteNetConfig { classes: 3, ..tiny() }, 0).unwrap();
        assert_eq!(three.params.get(three.layout.head.0).shape(), &[3, 8]);
        assert_eq!(AtteNetConfig::default().final_side(), 2);
    }

    #[test]
    fn se_squeeze_of_constant_channel_and_zero_gates() {
        let x = Tensor::from_fn(&[1, 4, 3, 3], |i| (i / 9) as f64 + 0.5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = g.global_avg_pool(xv).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, 1.5, 2.5, 3.5]);
        let w1 = g.constant(Tensor::zeros(&[1, 4, 1, 1]));
        let b1 = g.constant(Tensor::zeros(&[1]));
        let w2 = g.constant(Tensor::zeros(&[4, 1, 1, 1]));
        let b2 = g.constant(Tensor::zeros(&[4]));
        let y = se_block(&mut g, xv, w1, b1, w2, b2).unwrap();
        let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        assert_eq!(g.value(y).data(), half.as_slice());
    }

    #[test]
    fn probabilities_form_a_simplex_and_match_the_head() {
        let m = AtteNet::build(tiny(), 1).unwrap();
        let imgs = [noise_image(8, 1), noise_image(8, 2)];
        let refs: Vec<&LabeledImage> = imgs.iter().collect();
        let probs = m.forward_classify(&refs).unwrap();
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g);
        let xv = g.constant(m.batch_tensor(&refs).unwrap());
        let cv = m.forward_graph::<ChaCha8Rng>(&mut g, &bound, xv, Mode::Infer, None).unwrap();
        let pooled = g.value(cv.pooled).clone();
        let (w, b) = (m.params.get(m.layout.head.0), m.params.get(m.layout.head.1));
        for (i, p) in probs.iter().enumerate() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
            let feat = &pooled.data()[i * 8..(i + 1) * 8];
            let logits: Vec<f64> = (0..4)
                .map(|k| b.data()[k] + (0..8).map(|j| w.data()[k * 8 + j] * feat[j]).sum::<f64>())
                .collect();
            let expect = softmax(&logits);
            for (a, e) in p.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_probabilities() {
        let mut m = AtteNet::build(tiny(), 1).unwrap();
        let (w, b) = m.layout.head;
        m.params.get_mut(w).scale_in_place(0.0);
        m.params.get_mut(b).scale_in_place(0.0);
        let p = m.forward_classify(&[&noise_image(8, 3)]).unwrap();
        assert!(p[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_unit_with_zero_branch_returns_its_input() {
        let mut m = AtteNet::build(AtteNetConfig { units_per_stage: 2, ..tiny() }, 2).unwrap();
        let u = m.layout.stages[0].0[1].clone();
        assert!(u.projection.is_none());
        m.params.get_mut(u.conv3).scale_in_place(0.0);
        let x = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut stats = Vec::new();
        let y = m.unit(&mut g, &bound, xv, &u, Mode::Train, &mut stats).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn infer_mode_is_repeatable_and_size_is_checked() {
        let m = AtteNet::build(tiny(), 4).unwrap();
        let img = noise_image(8, 9);
        assert_eq!(m.forward_classify(&[&img]).unwrap(), m.forward_classify(&[&img]).unwrap());
        assert!(m.forward_classify(&[&noise_image(9, 1)]).is_err());
    }

    #[test]
    fn seeded_training_history_repeats() {
        let data: Vec<LabeledImage> = (0..8)
            .map(|i| {
                let state = TrafficLightState::ALL[i % 4];
                crate::synth::render_signal_patch(state, 16, 0.1, i as u64).unwrap()
            })
            .collect();
        let cfg = AtteNetConfig { input_size: 12, ..tiny() };
        let tc = ClassifierTrainConfig { epochs: 2, batch_size: 4, ..ClassifierTrainConfig::default() };
        let run = || {
            let mut m = AtteNet::build(cfg.clone(), 5).unwrap();
            train_classifier(&mut m, &data, &tc).unwrap().epoch_loss
        };
        assert_eq!(run(), run());
    }
}
