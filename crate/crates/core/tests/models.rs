use arcp_core::attenet::{se_block, AtteNet, AtteNetConfig};
use arcp_core::data::{AgentBatch, WindowSpec};
use arcp_core::fusion::{Arcp, FusionConfig, FusionVariant};
use arcp_core::iatcnn::{Model, ModelConfig, Variant};
use arcp_core::image::LabeledImage;
use arcp_core::labels::TrafficLightState;
use arcp_core::synth::{gen_intersection, CrossingSample, IntersectionConfig};
use arcp_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_forward_passes_give_valid_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut models = Vec::new();
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        for k in 0..4 {
            let cfg = ModelConfig {
                kernel_size: 2 + k,
                filters: vec![6, 6, 4 + k],
                convs_per_block: 1 + k % 2,
                t_obs: 5,
                t_pred: 4,
                n_max: 4,
                ..ModelConfig::desk(v)
            };
            models.push(Model::build(cfg, (10 * i + k) as u64).unwrap());
        }
    }
    for case in 0..1000 {
        let model = &models[case % models.len()];
        let n = rng.gen_range(1..=4);
        let scale = [0.1, 1.0, 30.0][case % 3];
        let mut obs = AgentBatch::zeros(n, 5, 0);
        for (f, m) in obs.features.data_mut().chunks_mut(5).zip(obs.mask.data_mut()) {
            *m = if rng.gen_bool(0.8) { 1.0 } else { 0.0 };
            if *m == 1.0 {
                f.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
            }
        }
        let p = model.forward(&obs).unwrap();
        assert!(p.sigma.data().iter().all(|&s| s > 0.0 && s.is_finite()), "case {case}");
        assert!(p.rho.data().iter().all(|&r| r.abs() < 1.0), "case {case}");
        assert!(p.mu.all_finite() && p.mask_prob.all_finite(), "case {case}");
        for q in p.quat.data().chunks(2) {
            assert!((q[0].hypot(q[1]) - 1.0).abs() < 1e-6, "case {case}");
        }
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squeeze_excitation_gates_lie_strictly_between_zero_and_one(seed in any::<u64>(), c4 in 1usize..5, side in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, r) = (4 * c4, c4);
        let x = Tensor::from_fn(&[2, c, side, side], |_| {
            let m = rng.gen_range(0.1..5.0);
            if rng.gen_bool(0.5) { m } else { -m }
        });
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w1 = g.constant(random_tensor(&[r, c, 1, 1], 1.0, &mut rng));
        let b1 = g.constant(random_tensor(&[r], 1.0, &mut rng));
        let w2 = g.constant(random_tensor(&[c, r, 1, 1], 1.0, &mut rng));
        let b2 = g.constant(random_tensor(&[c], 1.0, &mut rng));
        let y = se_block(&mut g, xv, w1, b1, w2, b2).unwrap();
        let plane = side * side;
        for (bc, (xs, ys)) in x.data().chunks(plane).zip(g.value(y).data().chunks(plane)).enumerate() {
            let gate = ys[0] / xs[0];
            prop_assert!(gate > 0.0 && gate < 1.0, "channel {bc}: gate {gate}");
            let (max_in, max_out) = (xs.iter().fold(0.0f64, |m, v| m.max(v.abs())), ys.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            prop_assert!(max_out <= max_in);
        }
    }
}

#[test]
fn three_class_network_has_a_three_wide_head() {
    let cfg = AtteNetConfig { widths: vec![4, 4, 8, 8, 8], classes: 3, input_size: 8, ..AtteNetConfig::default() };
    let net = AtteNet::build(cfg, 1).unwrap();
    let head = net.params.get(net.params.find("head.weight").unwrap());
    assert_eq!(head.shape()[0], 3);
    let img = LabeledImage::new(8, 8, vec![0.4; 8 * 8 * 3], TrafficLightState::Off).unwrap();
    let probs = net.forward_classify(&[&img]).unwrap();
    assert_eq!(probs[0].len(), 3);
    assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn small_arcp(variant: FusionVariant) -> (Arcp, Vec<CrossingSample>) {
    let spec = WindowSpec { t_obs: 4, t_pred: 3, stride: 7, n_max: 3 };
    let traj = Model::build(
        ModelConfig { kernel_size: 2, filters: vec![4, 4, 4], t_obs: 4, t_pred: 3, n_max: 3, ..ModelConfig::desk(Variant::IaTcnn) },
        1,
    )
    .unwrap();
    let light = AtteNet::build(AtteNetConfig { widths: vec![4, 4, 8, 8, 8], input_size: 16, ..AtteNetConfig::default() }, 2).unwrap();
    let cfg = FusionConfig { d: 8, h: 1, w: 1, c: 8, hidden: 16, variant, ..FusionConfig::default() };
    let ic = IntersectionConfig { n_scenes: 5, window: spec, image_size: 20, ..IntersectionConfig::default() };
    (Arcp::build(cfg, traj, light, 4).unwrap(), gen_intersection(&ic, 3).unwrap())
}

fn bits(p: &[[f64; 2]]) -> Vec<u64> {
    p.iter().flat_map(|q| q.map(f64::to_bits)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn each_variant_ignores_the_input_it_does_not_use(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mp, data) = small_arcp(FusionVariant::ArcpMp);
        let mut altered = data.clone();
        for s in &mut altered {
            s.image.pixels.iter_mut().for_each(|p| *p = rng.gen_range(0.0..1.0));
        }
        prop_assert_eq!(bits(&mp.predict_proba(&data).unwrap()), bits(&mp.predict_proba(&altered).unwrap()));

        let (tlr, data) = small_arcp(FusionVariant::ArcpTlr);
        let mut altered = data.clone();
        for s in &mut altered {
            s.obs.features.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-20.0..20.0));
            s.target.features.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-20.0..20.0));
        }
        prop_assert_eq!(bits(&tlr.predict_proba(&data).unwrap()), bits(&tlr.predict_proba(&altered).unwrap()));
    }

    #[test]
    fn crossing_probabilities_form_a_simplex(seed in any::<u64>(), v in 0usize..5) {
        let variant = FusionVariant::ALL[v];
        let (model, mut data) = small_arcp(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut data {
            s.image.pixels.iter_mut().for_each(|p| *p = rng.gen_range(0.0..1.0));
            for (f, m) in s.obs.features.data_mut().chunks_mut(5).zip(s.obs.mask.data()) {
                if *m == 1.0 {
                    f[0] += rng.gen_range(-5.0..5.0);
                    f[1] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        for p in model.predict_proba(&data).unwrap() {
            prop_assert!(p[0] >= 0.0 && p[1] >= 0.0);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }
}
