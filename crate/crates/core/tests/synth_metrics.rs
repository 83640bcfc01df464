use arcp_core::data::{Scene, WindowSpec};
use arcp_core::labels::{CrossingLabel, TrafficLightState};
use arcp_core::metrics::{ade, PointSet};
use arcp_core::synth::{
    constant_velocity_track, gen_social_forces, label_crossing, min_pairwise_distance, simulate, AgentInit, CrossingRule, Rect, SFParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_params() -> impl Strategy<Value = SFParams> {
    (0.5f64..2.5, 0.2f64..1.5, 0.0f64..8.0, 0.1f64..1.0, 0.1f64..0.6).prop_map(|(v0, tau, a, b, dt)| SFParams {
        v0,
        tau,
        a,
        b,
        dt,
        ..SFParams::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn social_force_speeds_respect_the_bound(p in arb_params(), n in 1usize..8, seed in any::<u64>()) {
        let scene = gen_social_forces(n, 30, &p, seed).unwrap();
        let bound = p.speed_bound() * (1.0 + 1e-12);
        prop_assert!(scene.tracks.iter().flat_map(|t| &t.samples).all(|s| s.v <= bound));
    }

    #[test]
    fn crossing_labels_match_a_brute_force_scan(seed in any::<u64>(), stride in 1usize..6, n_frames in 6u32..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame_rate = 2.5;
        let tracks = (0..rng.gen_range(0..4))
            .map(|i| {
                let start = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
                let vel = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
                let first = rng.gen_range(0..n_frames);
                constant_velocity_track(i, start, vel, first, rng.gen_range(1..20), frame_rate)
            })
            .collect();
        let scene = Scene { tracks, frame_rate };
        let mut phases: Vec<(u32, TrafficLightState)> = (0..rng.gen_range(0..4))
            .map(|_| (rng.gen_range(0..n_frames), TrafficLightState::ALL[rng.gen_range(0..4)]))
            .collect();
        phases.sort_by_key(|p| p.0);
        let rule = CrossingRule {
            corridor: Rect { x_min: -1.5, x_max: 1.5, y_min: -1.0, y_max: 1.0 },
            horizon: rng.gen_range(0.4..4.0),
            phases: phases.clone(),
        };
        let spec = WindowSpec { t_obs: 3, t_pred: 2, stride, n_max: 4 };
        let labels = label_crossing(&scene, &rule, &spec, n_frames).unwrap();

        let state_at = |f: u32| {
            let mut s = None;
            for &(start, st) in &phases {
                if start <= f {
                    s = Some(st);
                }
            }
            s
        };
        let h = (rule.horizon * frame_rate).round() as u32;
        let mut expected = Vec::new();
        let mut start = 0u32;
        while start + 5 <= n_frames {
            let decision = start + 2;
            let mut safe = true;
            for f in start..start + 5 {
                if matches!(state_at(f), Some(TrafficLightState::Red) | Some(TrafficLightState::Yellow)) {
                    safe = false;
                }
            }
            for t in &scene.tracks {
                for s in &t.samples {
                    let inside = s.x >= -1.5 && s.x <= 1.5 && s.y >= -1.0 && s.y <= 1.0;
                    if inside && s.frame >= decision && s.frame <= decision + h {
                        safe = false;
                    }
                }
            }
            expected.push((start, if safe { CrossingLabel::Cross } else { CrossingLabel::DontCross }));
            start += stride as u32;
        }
        let got: Vec<(u32, CrossingLabel)> = labels.windows.iter().map(|w| (w.start_frame, w.label)).collect();
        prop_assert_eq!(got, expected);
        prop_assert_eq!(labels.clone(), label_crossing(&scene, &rule, &spec, n_frames).unwrap());
    }

    #[test]
    fn displacement_is_zero_exactly_when_points_coincide(seed in any::<u64>(), n in 1usize..5, t in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = |rng: &mut ChaCha8Rng| PointSet {
            n_agents: n,
            t_steps: t,
            xy: (0..n * t).map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)]).collect(),
            yaw_deg: vec![0.0; n * t],
            v: vec![0.0; n * t],
        };
        let gt = points(&mut rng);
        let mut mask: Vec<bool> = (0..n * t).map(|_| rng.gen_bool(0.6)).collect();
        mask[0] = true;
        prop_assert_eq!(ade(&gt, &gt, &mask).unwrap(), 0.0);

        // moving only masked-out points keeps the error at zero
        let mut hidden = gt.clone();
        for i in (0..n * t).filter(|&i| !mask[i]) {
            hidden.xy[i][0] += 1.0;
        }
        prop_assert_eq!(ade(&hidden, &gt, &mask).unwrap(), 0.0);

        let mut moved = gt.clone();
        let masked: Vec<usize> = (0..n * t).filter(|&i| mask[i]).collect();
        let i = masked[rng.gen_range(0..masked.len())];
        moved.xy[i][1] += rng.gen_range(0.01..3.0);
        prop_assert!(ade(&moved, &gt, &mask).unwrap() > 0.0);
        let other = points(&mut rng);
        prop_assert!(ade(&other, &gt, &mask).unwrap() >= 0.0);
    }
}

#[test]
fn repulsion_increases_mean_head_on_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut with, mut without) = (0.0, 0.0);
    for _ in 0..100 {
        let offset = rng.gen_range(-0.4..0.4);
        let speed = rng.gen_range(1.0..1.6);
        let half = rng.gen_range(4.0..6.0);
        let agents = [
            AgentInit { pos: [-half, 0.0], vel: [speed, 0.0], goal: [half, offset], desired_speed: speed, spawn_frame: 0 },
            AgentInit { pos: [half, offset], vel: [-speed, 0.0], goal: [-half, 0.0], desired_speed: speed, spawn_frame: 0 },
        ];
        let steps = 30;
        with += min_pairwise_distance(&simulate(&agents, steps, &SFParams::default()).unwrap());
        without += min_pairwise_distance(&simulate(&agents, steps, &SFParams { a: 0.0, ..SFParams::default() }).unwrap());
    }
    assert!(with / 100.0 > without / 100.0, "with {} without {}", with / 100.0, without / 100.0);
}
