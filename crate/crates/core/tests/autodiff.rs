use arcp_core::optim::{AdamConfig, OptimizerState};
use arcp_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Two unrelated scalar losses over the same inputs `x [2, 3, 6]` and
/// causal-conv weights `w [4, 3, 2]`.
fn losses(g: &mut Graph<'_>, x: Var, w: Var) -> (Var, Var) {
    let h = g.causal_conv1d(x, w, None, 2).unwrap();
    let t = g.tanh(h);
    let l1 = g.sum(t);
    let e = g.elu(h);
    let sq = g.square(e);
    let s = g.sigmoid(x);
    let l2a = g.mean(sq);
    let l2b = g.sum(s);
    let l2 = g.add(l2a, l2b).unwrap();
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xt, wt) = (random(&[2, 3, 6], &mut rng), random(&[4, 3, 2], &mut rng));
        let grads_of = |pick: &dyn Fn(&mut Graph<'_>, Var, Var) -> Var| {
            let mut g = Graph::new();
            let x = g.param_owned(xt.clone());
            let w = g.param_owned(wt.clone());
            let (l1, l2) = losses(&mut g, x, w);
            let l = pick(&mut g, l1, l2);
            let grads = g.backward(l).unwrap();
            (grads.wrt_or_zeros(x, &xt), grads.wrt_or_zeros(w, &wt))
        };
        let (x1, w1) = grads_of(&|_, l1, _| l1);
        let (x2, w2) = grads_of(&|_, _, l2| l2);
        let (xc, wc) = grads_of(&|g, l1, l2| {
            let s1 = g.scale(l1, a);
            let s2 = g.scale(l2, b);
            g.add(s1, s2).unwrap()
        });
        for (c, (p, q)) in [(&xc, (&x1, &x2)), (&wc, (&w1, &w2))] {
            for ((v, u), z) in c.data().iter().zip(p.data()).zip(q.data()) {
                prop_assert!((v - (a * u + b * z)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn causal_convolution_ignores_the_future(
        seed in any::<u64>(),
        len in 2usize..12,
        kernel in 1usize..5,
        dilation in 1usize..4,
        depth in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, len], &mut rng);
        let ws: Vec<Tensor> = (0..depth).map(|_| random(&[3, 3, kernel], &mut rng)).collect();
        let t_prime = rng.gen_range(0..len);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let mut h = g.constant(x.clone());
            for w in &ws {
                let wv = g.constant(w.clone());
                let y = g.causal_conv1d(h, wv, None, dilation).unwrap();
                h = g.tanh(y);
            }
            g.value(h).clone()
        };
        let mut moved = x.clone();
        for (i, v) in moved.data_mut().iter_mut().enumerate() {
            if i % len == t_prime {
                *v += rng.gen_range(-2.0..2.0);
            }
        }
        let (before, after) = (run(&x), run(&moved));
        for (i, (p, q)) in before.data().iter().zip(after.data()).enumerate() {
            if i % len < t_prime {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 5], |_| rng.gen_range(-50.0..50.0)));
        let outs = [g.exp(x), g.tanh(x), g.sigmoid(x), g.softplus(x), g.elu(x), g.softmax(x), g.normalize_last(x)];
        for v in outs {
            prop_assert!(g.value(v).data().iter().all(|e| e.is_finite()));
            prop_assert_eq!(g.value(v).shape().iter().product::<usize>(), g.value(v).len());
        }
    }

    #[test]
    fn optimizer_counts_one_step_per_call(steps in 1u64..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random(&[3, 2], &mut rng);
        let g = random(&[3, 2], &mut rng);
        let mut opt = OptimizerState::adam(AdamConfig::with_lr(1e-2));
        for k in 0..steps {
            prop_assert_eq!(opt.steps(), k);
            opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        }
        prop_assert_eq!(opt.steps(), steps);
        prop_assert_eq!(p.shape(), &[3, 2]);
    }
}

#[test]
fn batch_norm_in_infer_mode_is_a_fixed_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 2, 2, 2], &mut rng);
    let mean = [0.3, -0.2];
    let var = [1.7, 0.4];
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::from_vec(vec![1.5, -0.5]));
        let beta = g.constant(Tensor::from_vec(vec![0.1, 0.2]));
        let (y, stats) = g.batch_norm(xv, gamma, beta, (&mean[..], &var[..]), false).unwrap();
        assert!(stats.is_none());
        g.value(y).clone()
    };
    let y = run(&x);
    assert_eq!(y, run(&x));
    for (i, (&v, &out)) in x.data().iter().zip(y.data()).enumerate() {
        let c = (i / 4) % 2;
        let expect = [1.5, -0.5][c] * (v - mean[c]) / (var[c] + 1e-5f64).sqrt() + [0.1, 0.2][c];
        assert!((out - expect).abs() < 1e-12);
    }
}
