//! Trajectory ingestion, robot-relative encoding and windowing into padded
//! observation / target batches with validity masks.
//!
//! The interchange format is a CSV with header `frame,agent_id,x,y,v,qw,qz`
//! (UTF-8, `.` decimal separator, LF or CRLF). Yaw is carried as the planar
//! quaternion `(qw, qz) = (cos(θ/2), sin(θ/2))`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature order inside one observation slot.
pub const FEATURES: usize = 5;
pub const CSV_HEADER: [&str; 7] = ["frame", "agent_id", "x", "y", "v", "qw", "qz"];
const QUAT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentSample {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub qw: f64,
    pub qz: f64,
}

impl AgentSample {
    pub fn yaw(&self) -> f64 {
        quat_to_yaw(self.qw, self.qz)
    }

    fn features(&self) -> [f64; FEATURES] {
        [self.x, self.y, self.v, self.qw, self.qz]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub agent_id: u64,
    /// Strictly increasing frames.
    pub samples: Vec<AgentSample>,
}

impl AgentTrack {
    pub fn first_frame(&self) -> u32 {
        self.samples[0].frame
    }

    pub fn last_frame(&self) -> u32 {
        self.samples[self.samples.len() - 1].frame
    }

    pub fn at(&self, frame: u32) -> Option<&AgentSample> {
        self.samples
            .binary_search_by_key(&frame, |s| s.frame)
            .ok()
            .map(|i| &self.samples[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub tracks: Vec<AgentTrack>,
    pub frame_rate: f64,
}

impl Scene {
    pub fn frame_range(&self) -> Option<(u32, u32)> {
        let lo = self.tracks.iter().map(AgentTrack::first_frame).min()?;
        let hi = self.tracks.iter().map(AgentTrack::last_frame).max()?;
        Some((lo, hi))
    }

    pub fn sample_count(&self) -> usize {
        self.tracks.iter().map(|t| t.samples.len()).sum()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }
}

pub fn yaw_to_quat(yaw: f64) -> (f64, f64) {
    ((yaw / 2.0).cos(), (yaw / 2.0).sin())
}

pub fn quat_to_yaw(qw: f64, qz: f64) -> f64 {
    2.0 * qz.atan2(qw)
}

/// Scene plus the number of quaternions that had to be renormalised.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub scene: Scene,
    pub normalized_quaternions: usize,
}

pub fn load_canonical(path: impl AsRef<Path>, frame_rate: f64) -> Result<LoadedScene> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_canonical(file, &path.display().to_string(), frame_rate)
}

pub fn read_canonical<R: Read>(reader: R, source: &str, frame_rate: f64) -> Result<LoadedScene> {
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("frame rate must be positive, got {frame_rate}")));
    }
    let err = |line: u64, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(err(1, format!("expected header {}", CSV_HEADER.join(","))));
    }

    let mut tracks: BTreeMap<u64, Vec<AgentSample>> = BTreeMap::new();
    let mut normalized = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != CSV_HEADER.len() {
            return Err(err(line, format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| err(line, format!("field {} is not a number: {:?}", CSV_HEADER[i], &rec[i])))?;
            if !v.is_finite() {
                return Err(err(line, format!("field {} is not finite", CSV_HEADER[i])));
            }
            Ok(v)
        };
        let frame: u32 = rec[0]
            .parse()
            .map_err(|_| err(line, format!("frame is not a non-negative integer: {:?}", &rec[0])))?;
        let agent_id: u64 = rec[1]
            .parse()
            .map_err(|_| err(line, format!("agent_id is not a non-negative integer: {:?}", &rec[1])))?;
        let (x, y, v, mut qw, mut qz) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
        if v < 0.0 {
            return Err(err(line, format!("negative speed {v}")));
        }
        let n = qw.hypot(qz);
        if n == 0.0 {
            return Err(err(line, "zero-norm quaternion".into()));
        }
        if (n - 1.0).abs() > QUAT_TOL {
            qw /= n;
            qz /= n;
            normalized += 1;
        }
        let samples = tracks.entry(agent_id).or_default();
        if let Some(prev) = samples.last() {
            if frame <= prev.frame {
                return Err(err(
                    line,
                    format!("non-monotonic frames for agent {agent_id}: {frame} after {}", prev.frame),
                ));
            }
        }
        samples.push(AgentSample { frame, x, y, v, qw, qz });
    }
    let tracks = tracks
        .into_iter()
        .map(|(agent_id, samples)| AgentTrack { agent_id, samples })
        .collect();
    Ok(LoadedScene {
        scene: Scene { tracks, frame_rate },
        normalized_quaternions: normalized,
    })
}

/// Writes rows ordered by frame then agent id. Floats use the shortest
/// round-tripping representation, so output is reproducible byte for byte.
pub fn write_canonical<W: Write>(scene: &Scene, writer: W) -> Result<()> {
    let mut rows: Vec<(u32, u64, &AgentSample)> = scene
        .tracks
        .iter()
        .flat_map(|t| t.samples.iter().map(move |s| (s.frame, t.agent_id, s)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (frame, id, s) in rows {
        w.write_record([
            frame.to_string(),
            id.to_string(),
            s.x.to_string(),
            s.y.to_string(),
            s.v.to_string(),
            s.qw.to_string(),
            s.qz.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn save_canonical(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_canonical(scene, std::io::BufWriter::new(file))
}

/// Robot pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

fn compose_yaw(qw: f64, qz: f64, delta: f64) -> (f64, f64) {
    let (dw, dz) = yaw_to_quat(delta);
    // planar quaternion product (dw + dz·k)(qw + qz·k)
    let w = dw * qw - dz * qz;
    let z = dw * qz + dz * qw;
    let n = w.hypot(z);
    (w / n, z / n)
}

fn map_scene(scene: &Scene, f: impl Fn(&AgentSample) -> AgentSample) -> Scene {
    Scene {
        tracks: scene
            .tracks
            .iter()
            .map(|t| AgentTrack {
                agent_id: t.agent_id,
                samples: t.samples.iter().map(&f).collect(),
            })
            .collect(),
        frame_rate: scene.frame_rate,
    }
}

/// Expresses every sample in the robot frame.
pub fn encode_relative(scene: &Scene, pose: RobotPose) -> Scene {
    let (s, c) = pose.yaw.sin_cos();
    map_scene(scene, |a| {
        let (dx, dy) = (a.x - pose.x, a.y - pose.y);
        let (qw, qz) = compose_yaw(a.qw, a.qz, -pose.yaw);
        AgentSample {
            frame: a.frame,
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            v: a.v,
            qw,
            qz,
        }
    })
}

/// Inverse of [`encode_relative`].
pub fn decode_relative(scene: &Scene, pose: RobotPose) -> Scene {
    let (s, c) = pose.yaw.sin_cos();
    map_scene(scene, |a| {
        let (qw, qz) = compose_yaw(a.qw, a.qz, pose.yaw);
        AgentSample {
            frame: a.frame,
            x: c * a.x - s * a.y + pose.x,
            y: s * a.x + c * a.y + pose.y,
            v: a.v,
            qw,
            qz,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
    pub n_max: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            t_obs: 8,
            t_pred: 12,
            stride: 20,
            n_max: 32,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs == 0 || self.t_pred == 0 || self.stride == 0 || self.n_max == 0 {
            return Err(Error::InvalidArgument(format!("window spec fields must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

/// Padded `N × T × 5` features with an `N × T` validity mask. Rows are
/// ordered by first detection inside the observation interval; padding
/// rows have `agent_id == None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentBatch {
    pub features: Tensor,
    pub mask: Tensor,
    pub agent_ids: Vec<Option<u64>>,
    pub start_frame: u32,
}

pub type ObservationBatch = AgentBatch;
pub type TargetBatch = AgentBatch;

impl AgentBatch {
    pub fn zeros(n: usize, t: usize, start_frame: u32) -> Self {
        AgentBatch {
            features: Tensor::zeros(&[n, t, FEATURES]),
            mask: Tensor::zeros(&[n, t]),
            agent_ids: vec![None; n],
            start_frame,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_valid(&self, agent: usize, t: usize) -> bool {
        self.mask.data()[agent * self.len() + t] > 0.5
    }

    /// Feature slot `(agent, t)` as `[x, y, v, qw, qz]`.
    pub fn slot(&self, agent: usize, t: usize) -> &[f64] {
        let o = (agent * self.len() + t) * FEATURES;
        &self.features.data()[o..o + FEATURES]
    }

    /// 1.0 for rows holding any valid slot.
    pub fn agent_activity(&self) -> Vec<f64> {
        let t = self.len();
        self.mask
            .data()
            .chunks(t)
            .map(|r| if r.iter().any(|&m| m > 0.5) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    fn put(&mut self, agent: usize, t: usize, s: &AgentSample) {
        let len = self.len();
        let o = (agent * len + t) * FEATURES;
        self.features.data_mut()[o..o + FEATURES].copy_from_slice(&s.features());
        self.mask.data_mut()[agent * len + t] = 1.0;
    }
}

/// Splits a scene into fixed windows of `t_obs + t_pred` frames, one per
/// stride step, keeping agents with at least two observed frames.
pub fn window_scene(scene: &Scene, spec: &WindowSpec) -> Result<Vec<(ObservationBatch, TargetBatch)>> {
    spec.validate()?;
    let Some((lo, hi)) = scene.frame_range() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let span = spec.span() as u32;
    let mut start = lo;
    while start + span - 1 <= hi {
        if let Some(w) = build_window(scene, spec, start) {
            out.push(w);
        }
        start += spec.stride as u32;
    }
    Ok(out)
}

/// One window starting at `start`; `None` when no agent qualifies.
pub fn build_window(scene: &Scene, spec: &WindowSpec, start: u32) -> Option<(ObservationBatch, TargetBatch)> {
    let obs_end = start + spec.t_obs as u32;
    let pred_end = obs_end + spec.t_pred as u32;
    let mut chosen: Vec<(u32, u64, &AgentTrack)> = scene
        .tracks
        .iter()
        .filter_map(|t| {
            let observed: Vec<&AgentSample> = t
                .samples
                .iter()
                .filter(|s| s.frame >= start && s.frame < obs_end)
                .collect();
            (observed.len() >= 2).then(|| (observed[0].frame, t.agent_id, t))
        })
        .collect();
    if chosen.is_empty() {
        return None;
    }
    chosen.sort_by_key(|c| (c.0, c.1));
    chosen.truncate(spec.n_max);

    let mut obs = AgentBatch::zeros(spec.n_max, spec.t_obs, start);
    let mut target = AgentBatch::zeros(spec.n_max, spec.t_pred, obs_end);
    for (row, (_, id, track)) in chosen.iter().enumerate() {
        obs.agent_ids[row] = Some(*id);
        target.agent_ids[row] = Some(*id);
        for s in &track.samples {
            if s.frame >= start && s.frame < obs_end {
                obs.put(row, (s.frame - start) as usize, s);
            } else if s.frame >= obs_end && s.frame < pred_end {
                target.put(row, (s.frame - obs_end) as usize, s);
            }
        }
    }
    Some((obs, target))
}

/// Constant-velocity forecast per row: `[N, t_pred, 3]` holding `(x, y, v)`.
/// Velocity is the displacement between the last two valid observations
/// divided by their frame gap; rows with one valid observation stay put and
/// rows with none are all zeros.
pub fn constant_velocity_forecast(obs: &ObservationBatch, t_pred: usize) -> Tensor {
    let (n, t_obs) = (obs.n_agents(), obs.len());
    let mut out = Tensor::zeros(&[n, t_pred, 3]);
    let data = out.data_mut();
    for a in 0..n {
        let mut valid = (0..t_obs).rev().filter(|&t| obs.is_valid(a, t));
        let Some(t1) = valid.next() else { continue };
        let last = obs.slot(a, t1);
        let (vx, vy) = match valid.next() {
            Some(t0) => {
                let prev = obs.slot(a, t0);
                let gap = (t1 - t0) as f64;
                ((last[0] - prev[0]) / gap, (last[1] - prev[1]) / gap)
            }
            None => (0.0, 0.0),
        };
        for k in 0..t_pred {
            let ahead = (t_obs - 1 - t1 + k + 1) as f64;
            let o = (a * t_pred + k) * 3;
            data[o] = last[0] + vx * ahead;
            data[o + 1] = last[1] + vy * ahead;
            data[o + 2] = last[2];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(frame: u32, x: f64, y: f64) -> AgentSample {
        AgentSample { frame, x, y, v: 1.0, qw: 1.0, qz: 0.0 }
    }

    fn track(id: u64, frames: std::ops::Range<u32>) -> AgentTrack {
        AgentTrack {
            agent_id: id,
            samples: frames.map(|f| sample(f, f as f64, id as f64)).collect(),
        }
    }

    #[test]
    fn loads_two_rows_for_one_agent() {
        let csv = "frame,agent_id,x,y,v,qw,qz\n0,7,1.0,2.0,0.5,1,0\r\n1,7,1.5,2.0,0.5,1,0\n";
        let loaded = read_canonical(csv.as_bytes(), "mem", 2.5).unwrap();
        assert_eq!(loaded.scene.tracks.len(), 1);
        assert_eq!(loaded.scene.tracks[0].agent_id, 7);
        assert_eq!(loaded.scene.tracks[0].samples.len(), 2);
        assert_eq!(loaded.normalized_quaternions, 0);
    }

    #[test]
    fn renormalizes_quaternion_and_counts_it() {
        let csv = "frame,agent_id,x,y,v,qw,qz\n0,1,0,0,0,2,0\n";
        let loaded = read_canonical(csv.as_bytes(), "mem", 2.5).unwrap();
        let s = loaded.scene.tracks[0].samples[0];
        assert_eq!((s.qw, s.qz), (1.0, 0.0));
        assert_eq!(loaded.normalized_quaternions, 1);
    }

    #[test]
    fn short_row_names_its_line() {
        let csv = "frame,agent_id,x,y,v,qw,qz\n0,1,0,0,0,1,0\n1,1,0,0\n";
        match read_canonical(csv.as_bytes(), "scene.csv", 2.5) {
            Err(Error::Parse { line, path, msg }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "scene.csv");
                assert!(msg.contains("found 4"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_quaternion_and_backwards_frames() {
        let zero = "frame,agent_id,x,y,v,qw,qz\n0,1,0,0,0,0,0\n";
        assert!(matches!(read_canonical(zero.as_bytes(), "m", 1.0), Err(Error::Parse { line: 2, .. })));
        let back = "frame,agent_id,x,y,v,qw,qz\n3,1,0,0,0,1,0\n2,1,0,0,0,1,0\n";
        assert!(matches!(read_canonical(back.as_bytes(), "m", 1.0), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn write_then_read_is_identity() {
        let scene = Scene {
            tracks: vec![track(2, 0..3), track(5, 1..4)],
            frame_rate: 2.5,
        };
        let mut buf = Vec::new();
        write_canonical(&scene, &mut buf).unwrap();
        let back = read_canonical(buf.as_slice(), "m", 2.5).unwrap().scene;
        assert_eq!(back, scene);
    }

    #[test]
    fn identity_pose_and_translation() {
        let scene = Scene {
            tracks: vec![AgentTrack { agent_id: 0, samples: vec![sample(0, 3.0, 0.0)] }],
            frame_rate: 1.0,
        };
        let same = encode_relative(&scene, RobotPose { x: 0.0, y: 0.0, yaw: 0.0 });
        assert_eq!(same, scene);
        let moved = encode_relative(&scene, RobotPose { x: 1.0, y: 0.0, yaw: 0.0 });
        let s = moved.tracks[0].samples[0];
        assert_eq!((s.x, s.y), (2.0, 0.0));
    }

    #[test]
    fn single_full_window() {
        let scene = Scene { tracks: vec![track(1, 0..20)], frame_rate: 2.5 };
        let spec = WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 4 };
        let w = window_scene(&scene, &spec).unwrap();
        assert_eq!(w.len(), 1);
        let (obs, tgt) = &w[0];
        assert_eq!(obs.mask.data()[..8], [1.0; 8]);
        assert_eq!(tgt.mask.data()[..12], [1.0; 12]);
        assert_eq!(obs.agent_ids[0], Some(1));
        assert!(obs.agent_ids[1..].iter().all(Option::is_none));
    }

    #[test]
    fn late_agent_is_left_padded() {
        let scene = Scene { tracks: vec![track(1, 0..20), track(2, 5..20)], frame_rate: 2.5 };
        let spec = WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 4 };
        let (obs, _) = &window_scene(&scene, &spec).unwrap()[0];
        assert_eq!(obs.mask.data()[8..16], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(obs.features.data()[8 * FEATURES..13 * FEATURES].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_velocity_extrapolates_last_step() {
        let scene = Scene { tracks: vec![track(1, 0..20)], frame_rate: 2.5 };
        let spec = WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 2 };
        let (obs, tgt) = &window_scene(&scene, &spec).unwrap()[0];
        let cv = constant_velocity_forecast(obs, 12);
        for k in 0..12 {
            assert!((cv.get(&[0, k, 0]) - tgt.slot(0, k)[0]).abs() < 1e-12);
        }
        assert!(cv.data()[36..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_scene_has_no_windows() {
        let scene = Scene { tracks: vec![], frame_rate: 2.5 };
        assert!(window_scene(&scene, &WindowSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn overflow_drops_latest_detected() {
        let scene = Scene {
            tracks: vec![track(9, 0..20), track(3, 2..20), track(4, 1..20)],
            frame_rate: 2.5,
        };
        let spec = WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 2 };
        let (obs, _) = &window_scene(&scene, &spec).unwrap()[0];
        assert_eq!(obs.agent_ids, vec![Some(9), Some(4)]);
    }

    #[test]
    fn single_observed_frame_is_excluded() {
        let scene = Scene { tracks: vec![track(1, 0..20), track(2, 7..20)], frame_rate: 2.5 };
        let spec = WindowSpec { t_obs: 8, t_pred: 12, stride: 20, n_max: 4 };
        let (obs, tgt) = &window_scene(&scene, &spec).unwrap()[0];
        assert_eq!(obs.agent_ids[1], None);
        assert_eq!(tgt.valid_count(), 12);
    }

    fn arb_scene() -> impl Strategy<Value = Scene> {
        proptest::collection::vec((0u32..30, 2u32..40, -10.0f64..10.0, -10.0f64..10.0, -3.0f64..3.0), 0..8).prop_map(|specs| {
            let tracks = specs
                .into_iter()
                .enumerate()
                .map(|(i, (start, len, x0, y0, yaw))| {
                    let (qw, qz) = yaw_to_quat(yaw);
                    AgentTrack {
                        agent_id: i as u64,
                        samples: (start..start + len)
                            .map(|f| AgentSample { frame: f, x: x0 + 0.1 * f as f64, y: y0 - 0.05 * f as f64, v: 0.3, qw, qz })
                            .collect(),
                    }
                })
                .collect();
            Scene { tracks, frame_rate: 2.5 }
        })
    }

    proptest! {
        #[test]
        fn masks_zero_features_and_rows_are_ordered(scene in arb_scene(), stride in 1usize..12) {
            let spec = WindowSpec { t_obs: 4, t_pred: 6, stride, n_max: 5 };
            for (obs, tgt) in window_scene(&scene, &spec).unwrap() {
                for b in [&obs, &tgt] {
                    for (m, f) in b.mask.data().iter().zip(b.features.data().chunks(FEATURES)) {
                        if *m == 0.0 {
                            prop_assert!(f.iter().all(|&v| v == 0.0));
                        }
                    }
                }
                let firsts: Vec<usize> = (0..obs.n_agents())
                    .filter(|&a| obs.agent_ids[a].is_some())
                    .map(|a| (0..obs.len()).find(|&t| obs.is_valid(a, t)).unwrap())
                    .collect();
                prop_assert!(firsts.windows(2).all(|w| w[0] <= w[1]));
                // padding rows come last
                let real = obs.agent_ids.iter().filter(|a| a.is_some()).count();
                prop_assert!(obs.agent_ids[real..].iter().all(Option::is_none));
            }
        }

        #[test]
        fn relative_encoding_round_trips_and_preserves_distances(
            scene in arb_scene(),
            px in -20.0f64..20.0, py in -20.0f64..20.0, yaw in -6.0f64..6.0,
        ) {
            let pose = RobotPose { x: px, y: py, yaw };
            let enc = encode_relative(&scene, pose);
            let dec = decode_relative(&enc, pose);
            for (a, b) in scene.tracks.iter().zip(&dec.tracks) {
                for (s, r) in a.samples.iter().zip(&b.samples) {
                    prop_assert!((s.x - r.x).abs() < 1e-9 && (s.y - r.y).abs() < 1e-9);
                    prop_assert!((s.qw - r.qw).abs() < 1e-9 && (s.qz - r.qz).abs() < 1e-9);
                    prop_assert_eq!(s.v, r.v);
                }
            }
            for (i, a) in scene.tracks.iter().enumerate() {
                for b in &scene.tracks[i + 1..] {
                    for s in &a.samples {
                        if let Some(o) = b.at(s.frame) {
                            let d0 = (s.x - o.x).hypot(s.y - o.y);
                            let ea = enc.tracks[i].at(s.frame).unwrap();
                            let eb = enc.tracks.iter().find(|t| t.agent_id == b.agent_id).unwrap().at(s.frame).unwrap();
                            prop_assert!((d0 - (ea.x - eb.x).hypot(ea.y - eb.y)).abs() < 1e-9);
                        }
                    }
                }
            }
        }

        #[test]
        fn disjoint_windows_conserve_samples(n in 1usize..6, len in 1u32..60) {
            let spec = WindowSpec { t_obs: 4, t_pred: 6, stride: 10, n_max: 8 };
            let tracks = (0..n as u64).map(|i| track(i, 0..len)).collect();
            let scene = Scene { tracks, frame_rate: 2.5 };
            let windows = window_scene(&scene, &spec).unwrap();
            let masked: usize = windows.iter().map(|(o, t)| o.valid_count() + t.valid_count()).sum();
            let covered = windows.len() * spec.span();
            prop_assert_eq!(masked, n * covered);
        }
    }
}
