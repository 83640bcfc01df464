//! Seeded synthetic scenes: social-forces pedestrians, straight-line agents,
//! geometric crossing labels, rendered signal patches and a signalised
//! intersection dataset for the crossing predictor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_window, load_canonical, save_canonical, yaw_to_quat, AgentBatch, AgentSample, AgentTrack, ObservationBatch, Scene,
    TargetBatch, WindowSpec,
};
use crate::error::{Error, Result};
use crate::image::{self, LabeledImage};
use crate::labels::{CrossingLabel, TrafficLightState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct SFParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Relaxation time, s.
    pub tau: f64,
    /// Repulsion strength, m/s².
    pub a: f64,
    /// Repulsion range, m.
    pub b: f64,
    /// Integration step and frame spacing, s.
    pub dt: f64,
    /// Sum of two agents' body radii, m.
    pub radius: f64,
}

impl Default for SFParams {
    fn default() -> Self {
        SFParams {
            v0: 1.3,
            tau: 0.5,
            a: 2.0,
            b: 0.3,
            dt: 0.4,
            radius: 0.6,
        }
    }
}

impl SFParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.v0, self.tau, self.b, self.dt].iter().all(|v| *v > 0.0 && v.is_finite())
            && self.a >= 0.0
            && self.radius >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("social-force parameters must be positive: {self:?}")))
        }
    }

    pub fn speed_bound(&self) -> f64 {
        2.0 * self.v0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentInit {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub desired_speed: f64,
    pub spawn_frame: u32,
}

/// Distance from the goal inside which the desired speed ramps down.
const ARRIVAL_RADIUS: f64 = 1.0;
const SUBSTEPS: usize = 4;

fn sample_of(frame: u32, pos: [f64; 2], vel: [f64; 2], yaw: f64) -> AgentSample {
    let (qw, qz) = yaw_to_quat(yaw);
    AgentSample {
        frame,
        x: pos[0],
        y: pos[1],
        v: vel[0].hypot(vel[1]),
        qw,
        qz,
    }
}

/// Integrates the social-forces dynamics with semi-implicit Euler:
/// `v ← v + Δt·((v_des·ê − v)/τ + Σ_j A·exp((r − d_ij)/B)·n̂_ij)`, then
/// `x ← x + Δt·v`, with the speed clamped to `2·v0`. Each recorded frame
/// is integrated in four equal substeps so close encounters stay stable.
pub fn simulate(agents: &[AgentInit], steps: usize, p: &SFParams) -> Result<Scene> {
    p.validate()?;
    let n = agents.len();
    let mut pos: Vec<[f64; 2]> = agents.iter().map(|a| a.pos).collect();
    let mut vel: Vec<[f64; 2]> = agents.iter().map(|a| a.vel).collect();
    let mut yaw: Vec<f64> = agents.iter().map(|a| (a.goal[1] - a.pos[1]).atan2(a.goal[0] - a.pos[0])).collect();
    let mut tracks: Vec<Vec<AgentSample>> = vec![Vec::new(); n];
    let bound = p.speed_bound();
    for frame in 0..steps as u32 {
        let active: Vec<bool> = agents.iter().map(|a| a.spawn_frame <= frame).collect();
        for i in 0..n {
            if active[i] {
                let s = vel[i][0].hypot(vel[i][1]);
                if s > 1e-9 {
                    yaw[i] = vel[i][1].atan2(vel[i][0]);
                }
                tracks[i].push(sample_of(frame, pos[i], vel[i], yaw[i]));
            }
        }
        let h = p.dt / SUBSTEPS as f64;
        for _ in 0..SUBSTEPS {
            let mut next = vel.clone();
            for i in (0..n).filter(|&i| active[i]) {
                let a = &agents[i];
                let to_goal = [a.goal[0] - pos[i][0], a.goal[1] - pos[i][1]];
                let dist = to_goal[0].hypot(to_goal[1]);
                let desired = if dist > 1e-9 {
                    let s = a.desired_speed * (dist / ARRIVAL_RADIUS).min(1.0);
                    [s * to_goal[0] / dist, s * to_goal[1] / dist]
                } else {
                    [0.0, 0.0]
                };
                let mut f = [(desired[0] - vel[i][0]) / p.tau, (desired[1] - vel[i][1]) / p.tau];
                for j in (0..n).filter(|&j| j != i && active[j]) {
                    let d = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
                    let dn = d[0].hypot(d[1]).max(1e-9);
                    let mag = p.a * ((p.radius - dn) / p.b).exp();
                    f[0] += mag * d[0] / dn;
                    f[1] += mag * d[1] / dn;
                }
                let mut v = [vel[i][0] + h * f[0], vel[i][1] + h * f[1]];
                let s = v[0].hypot(v[1]);
                if s > bound {
                    v = [v[0] * bound / s, v[1] * bound / s];
                }
                next[i] = v;
            }
            for i in (0..n).filter(|&i| active[i]) {
                vel[i] = next[i];
                pos[i][0] += h * vel[i][0];
                pos[i][1] += h * vel[i][1];
            }
        }
    }
    Ok(Scene {
        tracks: tracks
            .into_iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, samples)| AgentTrack { agent_id: i as u64, samples })
            .collect(),
        frame_rate: 1.0 / p.dt,
    })
}

/// Smallest distance between any two agents, with positions interpolated
/// linearly between consecutive shared frames.
pub fn min_pairwise_distance(scene: &Scene) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in scene.tracks.iter().enumerate() {
        for b in &scene.tracks[i + 1..] {
            let shared: Vec<(f64, f64)> = a
                .samples
                .iter()
                .filter_map(|s| b.at(s.frame).map(|o| (s.x - o.x, s.y - o.y)))
                .collect();
            if let Some(&(x, y)) = shared.first() {
                best = best.min(x.hypot(y));
            }
            for w in shared.windows(2) {
                let (p, q) = (w[0], w[1]);
                let d = (q.0 - p.0, q.1 - p.1);
                let len2 = d.0 * d.0 + d.1 * d.1;
                let t = if len2 > 0.0 { (-(p.0 * d.0 + p.1 * d.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
                best = best.min((p.0 + t * d.0).hypot(p.1 + t * d.1));
            }
        }
    }
    best
}

/// Agents start on a circle of radius 4–6 m and head for a point near the
/// antipode, with spawns staggered over the first three frames.
pub fn gen_social_forces(n_agents: usize, steps: usize, params: &SFParams, seed: u64) -> Result<Scene> {
    if n_agents == 0 {
        return Err(Error::InvalidArgument("n_agents must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<AgentInit> = (0..n_agents)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.gen_range(4.0..6.0);
            let pos = [r * theta.cos(), r * theta.sin()];
            let goal = [-pos[0] + rng.gen_range(-1.0..1.0), -pos[1] + rng.gen_range(-1.0..1.0)];
            let speed = params.v0 * rng.gen_range(0.8..1.2);
            let d = (goal[0] - pos[0]).hypot(goal[1] - pos[1]);
            AgentInit {
                pos,
                vel: [speed * (goal[0] - pos[0]) / d, speed * (goal[1] - pos[1]) / d],
                goal,
                desired_speed: speed,
                spawn_frame: rng.gen_range(0..3),
            }
        })
        .collect();
    simulate(&agents, steps, params)
}

/// One straight track from `start` with constant velocity `vel` (m/s).
pub fn constant_velocity_track(agent_id: u64, start: [f64; 2], vel: [f64; 2], first_frame: u32, steps: usize, frame_rate: f64) -> AgentTrack {
    let yaw = vel[1].atan2(vel[0]);
    AgentTrack {
        agent_id,
        samples: (0..steps)
            .map(|k| {
                let t = k as f64 / frame_rate;
                sample_of(first_frame + k as u32, [start[0] + vel[0] * t, start[1] + vel[1] * t], vel, yaw)
            })
            .collect(),
    }
}

pub fn gen_constant_velocity(n_agents: usize, steps: usize, speed: (f64, f64), frame_rate: f64, seed: u64) -> Result<Scene> {
    if n_agents == 0 {
        return Err(Error::InvalidArgument("n_agents must be at least 1".into()));
    }
    if !(speed.0 > 0.0 && speed.0 <= speed.1) || frame_rate <= 0.0 {
        return Err(Error::InvalidArgument(format!("bad speed range {speed:?} or frame rate {frame_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = (0..n_agents)
        .map(|i| {
            let start = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = if speed.0 == speed.1 { speed.0 } else { rng.gen_range(speed.0..speed.1) };
            constant_velocity_track(i as u64, start, [s * heading.cos(), s * heading.sin()], 0, steps, frame_rate)
        })
        .collect();
    Ok(Scene { tracks, frame_rate })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingRule {
    pub corridor: Rect,
    /// Look-ahead from the decision frame, seconds.
    pub horizon: f64,
    /// `(start frame, state)` pairs sorted by start frame.
    pub phases: Vec<(u32, TrafficLightState)>,
}

impl CrossingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.corridor.area() > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("corridor needs positive area and horizon must be positive".into()));
        }
        if self.phases.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::InvalidArgument("signal phases must be sorted by start frame".into()));
        }
        Ok(())
    }

    /// Signal state at `frame`, `None` before the first phase or without a schedule.
    pub fn signal_at(&self, frame: u32) -> Option<TrafficLightState> {
        self.phases.iter().rev().find(|(s, _)| *s <= frame).map(|&(_, st)| st)
    }

    pub fn horizon_frames(&self, frame_rate: f64) -> u32 {
        (self.horizon * frame_rate).round() as u32
    }
}

fn permits_crossing(s: Option<TrafficLightState>) -> bool {
    matches!(s, None | Some(TrafficLightState::Green) | Some(TrafficLightState::Off))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowLabel {
    pub start_frame: u32,
    /// Last observed frame; the look-ahead starts here.
    pub decision_frame: u32,
    pub label: CrossingLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossingLabels {
    pub windows: Vec<WindowLabel>,
    pub frame_states: Vec<Option<TrafficLightState>>,
}

/// Labels every window start `0, stride, …` that fits in `n_frames`. A
/// window is `Cross` iff the signal permits crossing on all of its frames
/// and no agent sample from the decision frame through the horizon lies in
/// the corridor.
pub fn label_crossing(scene: &Scene, rule: &CrossingRule, spec: &WindowSpec, n_frames: u32) -> Result<CrossingLabels> {
    rule.validate()?;
    spec.validate()?;
    let frame_states: Vec<Option<TrafficLightState>> = (0..n_frames).map(|f| rule.signal_at(f)).collect();
    let span = spec.span() as u32;
    let h = rule.horizon_frames(scene.frame_rate);
    let mut windows = Vec::new();
    let mut start = 0;
    while start + span <= n_frames {
        let decision = start + spec.t_obs as u32 - 1;
        let signal_ok = (start..start + span).all(|f| permits_crossing(frame_states[f as usize]));
        let clear = || {
            !scene.tracks.iter().any(|t| {
                t.samples
                    .iter()
                    .any(|s| s.frame >= decision && s.frame <= decision + h && rule.corridor.contains(s.x, s.y))
            })
        };
        let label = if signal_ok && clear() { CrossingLabel::Cross } else { CrossingLabel::DontCross };
        windows.push(WindowLabel { start_frame: start, decision_frame: decision, label });
        start += spec.stride as u32;
    }
    Ok(CrossingLabels { windows, frame_states })
}

pub fn signal_color(state: TrafficLightState) -> Option<[f64; 3]> {
    match state {
        TrafficLightState::Red => Some([0.9, 0.12, 0.1]),
        TrafficLightState::Green => Some([0.1, 0.85, 0.3]),
        TrafficLightState::Yellow => Some([0.95, 0.8, 0.1]),
        TrafficLightState::Off => None,
    }
}

/// Noise background with a coloured disc (none for `Off`) at a jittered
/// position near the centre.
pub fn render_signal_patch(state: TrafficLightState, size: usize, noise: f64, seed: u64) -> Result<LabeledImage> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("patch size must be at least 16, got {size}")));
    }
    let noise = noise.clamp(0.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let jitter = s / 8.0;
    let cx = s / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = s / 2.0 + rng.gen_range(-jitter..jitter);
    let r = s / 6.0;
    let color = signal_color(state);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let inside = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() <= r;
            for c in 0..3 {
                let n = if noise > 0.0 { rng.gen_range(0.0..noise) } else { 0.0 };
                let base = match (inside, color) {
                    (true, Some(col)) => col[c] * (1.0 - noise),
                    _ => 0.15,
                };
                pixels.push((base + n).clamp(0.0, 1.0));
            }
        }
    }
    LabeledImage::new(size, size, pixels, state)
}

/// Class-balanced disc images, classes assigned round-robin.
pub fn disc_dataset(n: usize, size: usize, n_classes: usize, noise: f64, seed: u64) -> Result<Vec<LabeledImage>> {
    let classes = TrafficLightState::classes(n_classes)
        .ok_or_else(|| Error::InvalidArgument(format!("class count must be 3 or 4, got {n_classes}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| render_signal_patch(classes[i % classes.len()], size, noise, rng.gen()))
        .collect()
}

/// One crossing example: an observed window, its ground-truth future, the
/// signal image seen at decision time and the safety label.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossingSample {
    pub scene: Scene,
    pub obs: ObservationBatch,
    pub target: TargetBatch,
    pub image: LabeledImage,
    pub label: CrossingLabel,
}

impl CrossingSample {
    pub fn light(&self) -> TrafficLightState {
        self.image.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct IntersectionConfig {
    pub n_scenes: usize,
    pub window: WindowSpec,
    pub frame_rate: f64,
    pub horizon: f64,
    pub corridor: Rect,
    pub image_size: usize,
    pub image_noise: f64,
    pub p_unsignalized: f64,
    pub n_classes: usize,
    /// Half-width (m) of uniform noise added to observed positions; labels
    /// use the noise-free motion.
    pub position_jitter: f64,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        IntersectionConfig {
            n_scenes: 400,
            window: WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 4 },
            frame_rate: 2.5,
            horizon: 4.0,
            corridor: Rect { x_min: -2.0, x_max: 2.0, y_min: 1.0, y_max: 5.0 },
            image_size: 40,
            image_noise: 0.2,
            p_unsignalized: 0.5,
            n_classes: 4,
            position_jitter: 0.05,
        }
    }
}

/// A road along x with two lanes inside the corridor's y-range: vehicles at
/// constant speeds of 2–5 m/s either reach the corridor within the horizon
/// ("danger") or pass well clear of it. Half the scenes (by default) are
/// unsignalised; on signalised scenes Red and Yellow forbid crossing.
pub fn gen_intersection(cfg: &IntersectionConfig, seed: u64) -> Result<Vec<CrossingSample>> {
    cfg.window.validate()?;
    let classes = TrafficLightState::classes(cfg.n_classes)
        .ok_or_else(|| Error::InvalidArgument(format!("class count must be 3 or 4, got {}", cfg.n_classes)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = cfg.window.span();
    let d = cfg.window.t_obs - 1;
    let dt = 1.0 / cfg.frame_rate;
    let lanes = [
        (cfg.corridor.y_min + 0.25 * (cfg.corridor.y_max - cfg.corridor.y_min), 1.0),
        (cfg.corridor.y_min + 0.75 * (cfg.corridor.y_max - cfg.corridor.y_min), -1.0),
    ];
    let mut out = Vec::with_capacity(cfg.n_scenes);
    for _ in 0..cfg.n_scenes {
        let light = if rng.gen_bool(cfg.p_unsignalized.clamp(0.0, 1.0)) {
            TrafficLightState::Off
        } else {
            let u: f64 = rng.gen();
            let pick = if u < 0.4 {
                TrafficLightState::Red
            } else if u < 0.9 || !classes.contains(&TrafficLightState::Yellow) {
                TrafficLightState::Green
            } else {
                TrafficLightState::Yellow
            };
            pick
        };
        let p_danger = if light == TrafficLightState::Green { 0.2 } else { 0.5 };
        let danger = rng.gen_bool(p_danger);
        let n_clear = rng.gen_range(0..=2usize) + usize::from(!danger);
        let mut tracks = Vec::new();
        let mut kinds: Vec<bool> = std::iter::repeat(false).take(n_clear).collect();
        if danger {
            kinds.push(true);
        }
        kinds.shuffle(&mut rng);
        for (id, is_danger) in kinds.into_iter().enumerate() {
            let (lane_y, dir) = lanes[rng.gen_range(0..2)];
            let speed = rng.gen_range(2.0..5.0);
            // entry edge of the corridor for this direction of travel
            let edge = if dir > 0.0 { cfg.corridor.x_min } else { cfg.corridor.x_max };
            let exit = if dir > 0.0 { cfg.corridor.x_max } else { cfg.corridor.x_min };
            let x_at_decision = if is_danger {
                let t_entry = rng.gen_range(0.0..(cfg.horizon - dt));
                edge - dir * speed * t_entry
            } else if rng.gen_bool(0.5) {
                let t_entry = rng.gen_range(cfg.horizon + 3.0 * dt..cfg.horizon + 6.0);
                edge - dir * speed * t_entry
            } else {
                // already past the corridor and moving away
                exit + dir * rng.gen_range(0.5..15.0)
            };
            let start = [x_at_decision - dir * speed * d as f64 * dt, lane_y];
            tracks.push(constant_velocity_track(id as u64, start, [dir * speed, 0.0], 0, span, cfg.frame_rate));
        }
        let mut scene = Scene { tracks, frame_rate: cfg.frame_rate };
        let rule = CrossingRule {
            corridor: cfg.corridor,
            horizon: cfg.horizon,
            phases: vec![(0, light)],
        };
        let label = label_crossing(&scene, &rule, &cfg.window, span as u32)?.windows[0].label;
        if cfg.position_jitter > 0.0 {
            let j = cfg.position_jitter;
            for s in scene.tracks.iter_mut().flat_map(|t| t.samples.iter_mut()) {
                s.x += rng.gen_range(-j..j);
                s.y += rng.gen_range(-j..j);
            }
        }
        let mut image = render_signal_patch(light, cfg.image_size, cfg.image_noise, rng.gen())?;
        image::quantize(&mut image);
        let (obs, target) = build_window(&scene, &cfg.window, 0).unwrap_or_else(|| {
            (
                AgentBatch::zeros(cfg.window.n_max, cfg.window.t_obs, 0),
                AgentBatch::zeros(cfg.window.n_max, cfg.window.t_pred, cfg.window.t_obs as u32),
            )
        });
        out.push(CrossingSample { scene, obs, target, image, label });
    }
    Ok(out)
}

/// Writes `manifest.csv` (`window_id,image_file,label`), one canonical
/// trajectory CSV per window under `windows/` and the images plus their
/// `labels.csv` index under `images/`.
pub fn save_crossing_dataset(dir: impl AsRef<Path>, samples: &[CrossingSample]) -> Result<()> {
    let dir = dir.as_ref();
    let wdir = dir.join("windows");
    fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let images: Vec<LabeledImage> = samples.iter().map(|s| s.image.clone()).collect();
    image::save_dataset(dir.join("images"), &images)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", manifest.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("manifest.csv: {e}"));
    w.write_record(["window_id", "image_file", "label"]).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("w_{i:05}");
        save_canonical(&s.scene, wdir.join(format!("{id}.csv")))?;
        w.write_record([id.as_str(), &format!("images/img_{i:05}.ppm"), s.label.name()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

pub fn load_crossing_dataset(dir: impl AsRef<Path>, spec: &WindowSpec, frame_rate: f64) -> Result<Vec<CrossingSample>> {
    let dir = dir.as_ref();
    let images = image::load_dataset(dir.join("images").join("labels.csv"))?;
    let by_name: HashMap<String, LabeledImage> = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("images/img_{i:05}.ppm"), img))
        .collect();
    let manifest = dir.join("manifest.csv");
    let src = manifest.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("{src}: {e}")))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::InvalidArgument(format!("{src}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { path: src.clone(), line, msg };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let scene = load_canonical(dir.join("windows").join(format!("{}.csv", &rec[0])), frame_rate)?.scene;
        let image = by_name
            .get(&rec[1])
            .cloned()
            .ok_or_else(|| bad(format!("image {} not listed in images/labels.csv", &rec[1])))?;
        let label: CrossingLabel = rec[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let (obs, target) = build_window(&scene, spec, 0).unwrap_or_else(|| {
            (AgentBatch::zeros(spec.n_max, spec.t_obs, 0), AgentBatch::zeros(spec.n_max, spec.t_pred, spec.t_obs as u32))
        });
        out.push(CrossingSample { scene, obs, target, image, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::quat_to_yaw;

    fn min_separation(scene: &Scene) -> f64 {
        min_pairwise_distance(scene)
    }

    #[test]
    fn interpolated_distance_of_crossing_lines() {
        let a = constant_velocity_track(0, [-1.0, 0.0], [1.0, 0.0], 0, 3, 1.0);
        let b = constant_velocity_track(1, [1.0, 0.5], [-1.0, 0.0], 0, 3, 1.0);
        let scene = Scene { tracks: vec![a, b], frame_rate: 1.0 };
        assert!((min_pairwise_distance(&scene) - 0.5).abs() < 1e-12);
    }

    fn head_on(offset: f64) -> Vec<AgentInit> {
        vec![
            AgentInit { pos: [-5.0, 0.0], vel: [1.3, 0.0], goal: [5.0, offset], desired_speed: 1.3, spawn_frame: 0 },
            AgentInit { pos: [5.0, offset], vel: [-1.3, 0.0], goal: [-5.0, 0.0], desired_speed: 1.3, spawn_frame: 0 },
        ]
    }

    #[test]
    fn lone_agent_walks_straight_at_constant_speed() {
        let p = SFParams { a: 0.0, ..SFParams::default() };
        let a = AgentInit { pos: [0.0, 0.0], vel: [1.3, 0.0], goal: [100.0, 0.0], desired_speed: 1.3, spawn_frame: 0 };
        let scene = simulate(&[a], 30, &p).unwrap();
        for (k, s) in scene.tracks[0].samples.iter().enumerate() {
            assert!((s.x - 1.3 * 0.4 * k as f64).abs() < 1e-9);
            assert_eq!(s.y, 0.0);
            assert!((s.v - 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn repulsion_keeps_head_on_agents_apart() {
        let with = simulate(&head_on(0.1), 25, &SFParams::default()).unwrap();
        let without = simulate(&head_on(0.1), 25, &SFParams { a: 0.0, ..SFParams::default() }).unwrap();
        assert!(min_separation(&with) > min_separation(&without));
    }

    #[test]
    fn social_forces_are_seeded_and_bounded() {
        let p = SFParams::default();
        let a = gen_social_forces(6, 40, &p, 3).unwrap();
        assert_eq!(a, gen_social_forces(6, 40, &p, 3).unwrap());
        assert_ne!(a, gen_social_forces(6, 40, &p, 4).unwrap());
        assert!(a.tracks.iter().flat_map(|t| &t.samples).all(|s| s.v <= p.speed_bound() + 1e-12));
    }

    #[test]
    fn constant_velocity_unit_steps() {
        let t = constant_velocity_track(0, [0.0, 0.0], [1.0, 0.0], 0, 4, 1.0);
        let xs: Vec<(f64, f64)> = t.samples.iter().map(|s| (s.x, s.y)).collect();
        assert_eq!(xs, vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let scene = gen_constant_velocity(4, 10, (0.5, 2.0), 2.5, 1).unwrap();
        for tr in &scene.tracks {
            for w in tr.samples.windows(2) {
                let (dx, dy) = ((w[1].x - w[0].x) * 2.5, (w[1].y - w[0].y) * 2.5);
                assert!((dx.hypot(dy) - w[0].v).abs() < 1e-9);
                let dyaw = quat_to_yaw(w[0].qw, w[0].qz) - dy.atan2(dx);
                assert!(dyaw.sin().abs() < 1e-9 && dyaw.cos() > 0.0);
            }
        }
    }

    fn rule(state: TrafficLightState) -> CrossingRule {
        CrossingRule {
            corridor: Rect { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0 },
            horizon: 2.0,
            phases: vec![(0, state)],
        }
    }

    const SPEC: WindowSpec = WindowSpec { t_obs: 4, t_pred: 4, stride: 8, n_max: 4 };

    #[test]
    fn empty_green_scene_is_safe() {
        let scene = Scene { tracks: vec![], frame_rate: 2.0 };
        let l = label_crossing(&scene, &rule(TrafficLightState::Green), &SPEC, 8).unwrap();
        assert_eq!(l.windows[0].label, CrossingLabel::Cross);
        let red = label_crossing(&scene, &rule(TrafficLightState::Red), &SPEC, 8).unwrap();
        assert_eq!(red.windows[0].label, CrossingLabel::DontCross);
    }

    #[test]
    fn approaching_agent_blocks_and_receding_agent_does_not() {
        // decision frame 3 at x = -2; the corridor edge x = -1 is 1 m ahead at
        // 1 m/s, so entry happens 1 s (2 frames) later, inside the 2 s horizon
        let toward = constant_velocity_track(0, [-3.5, 0.0], [1.0, 0.0], 0, 8, 2.0);
        let scene = Scene { tracks: vec![toward], frame_rate: 2.0 };
        let l = label_crossing(&scene, &rule(TrafficLightState::Green), &SPEC, 8).unwrap();
        assert_eq!(l.windows[0].label, CrossingLabel::DontCross);
        let away = constant_velocity_track(0, [-2.0, 0.0], [-1.0, 0.0], 0, 8, 2.0);
        let scene = Scene { tracks: vec![away], frame_rate: 2.0 };
        let l = label_crossing(&scene, &rule(TrafficLightState::Off), &SPEC, 8).unwrap();
        assert_eq!(l.windows[0].label, CrossingLabel::Cross);
    }

    #[test]
    fn patches_follow_their_class() {
        let off = render_signal_patch(TrafficLightState::Off, 24, 0.0, 1).unwrap();
        assert!(off.pixels.iter().all(|&p| p == 0.15));
        let red = render_signal_patch(TrafficLightState::Red, 24, 0.1, 1).unwrap();
        assert!(red.channel_mean(0) > red.channel_mean(1));
        let a = render_signal_patch(TrafficLightState::Green, 24, 0.0, 1).unwrap();
        let b = render_signal_patch(TrafficLightState::Green, 24, 0.0, 2).unwrap();
        assert_ne!(a.pixels, b.pixels);
        assert!(render_signal_patch(TrafficLightState::Red, 8, 0.1, 1).is_err());
    }

    #[test]
    fn intersection_dataset_round_trips_through_disk() {
        let cfg = IntersectionConfig { n_scenes: 6, ..IntersectionConfig::default() };
        let samples = gen_intersection(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_crossing_dataset(dir.path(), &samples).unwrap();
        let back = load_crossing_dataset(dir.path(), &cfg.window, cfg.frame_rate).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image, b.image);
            assert_eq!(a.obs, b.obs);
        }
    }
}
