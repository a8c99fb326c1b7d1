use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::Rng;

use diffrouter::netcore::{Activation, AdamWConfig, DenseNet, OptimizerState, ParamSet};
use diffrouter::router::{DomainId, RouterConfig, RouterParams};
use diffrouter::seed::rng_from_seed;
use diffrouter::train::regress;

fn flat<P: ParamSet>(p: &P) -> Vec<f64> {
    p.param_slices().concat()
}

fn set_flat<P: ParamSet>(p: &mut P, index: usize, value: f64) {
    let mut i = index;
    for s in p.param_slices_mut() {
        if i < s.len() {
            s[i] = value;
            return;
        }
        i -= s.len();
    }
    panic!("index {index} out of range");
}

fn close(g: f64, fd: f64) -> bool {
    (g - fd).abs() <= (1e-4 * g.abs().max(fd.abs())).max(1e-7)
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Silu), Just(Activation::Tanh), Just(Activation::Identity)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dense_gradients_match_central_differences(
        widths in prop::collection::vec(1usize..=16, 2..=4),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let mut rng = rng_from_seed(seed);
        let mut net = DenseNet::random(&widths, act, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &DenseNet| -> f64 {
            n.forward(&x).unwrap().iter().zip(&y).map(|(o, t)| 0.5 * (o - t).powi(2)).sum()
        };
        let out = net.forward(&x).unwrap();
        let og: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        let analytic = flat(&net.backward(&x, &og).unwrap());
        let base = flat(&net);
        let h = 1e-5;
        for (p, &v) in base.iter().enumerate() {
            set_flat(&mut net, p, v + h);
            let up = loss(&net);
            set_flat(&mut net, p, v - h);
            let down = loss(&net);
            set_flat(&mut net, p, v);
            let fd = (up - down) / (2.0 * h);
            prop_assert!(close(analytic[p], fd), "param {p}: analytic {} vs fd {fd}", analytic[p]);
        }
    }

    #[test]
    fn router_gradients_cover_embeddings(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = rng_from_seed(seed);
        let cfg = RouterConfig {
            hidden: vec![6, 5],
            zero_output: false,
            embed_dim: 3,
            time_dim: 4,
            ..RouterConfig::new(2, 3, 20)
        };
        let mut params = RouterParams::new(cfg, &mut rng).unwrap();
        let x_t = Array2::from_shape_fn((rows, 2), |_| rng.random_range(-1.0..1.0));
        let x_s = Array2::from_shape_fn((rows, 2), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((rows, 2), |_| rng.random_range(-1.0..1.0));
        let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=20)).collect();
        let tgt: Vec<DomainId> = (0..rows).map(|_| DomainId(rng.random_range(0..3))).collect();
        let src: Vec<DomainId> = tgt.iter().map(|d| DomainId((d.0 + 1) % 3)).collect();
        let loss = |p: &RouterParams, x_t: ArrayView2<f64>, x_s: ArrayView2<f64>, target: ArrayView2<f64>| {
            regress(p, x_t, &t, x_s, &tgt, &src, target).unwrap()
        };
        let reg = loss(&params, x_t.view(), x_s.view(), target.view());
        let mut analytic = flat(&reg.grads.backbone);
        analytic.extend(reg.grads.embeddings.iter());
        let base = flat(&params);
        prop_assert_eq!(base.len(), analytic.len());
        let h = 1e-5;
        for (p, &v) in base.iter().enumerate() {
            set_flat(&mut params, p, v + h);
            let up = loss(&params, x_t.view(), x_s.view(), target.view()).loss;
            set_flat(&mut params, p, v - h);
            let down = loss(&params, x_t.view(), x_s.view(), target.view()).loss;
            set_flat(&mut params, p, v);
            let fd = (up - down) / (2.0 * h);
            prop_assert!(close(analytic[p], fd), "param {p}: analytic {} vs fd {fd}", analytic[p]);
        }
    }

    #[test]
    fn gradients_stay_finite_on_finite_inputs(
        widths in prop::collection::vec(1usize..=12, 2..=4),
        seed in any::<u64>(),
        scale in 0.0f64..50.0,
    ) {
        let mut rng = rng_from_seed(seed);
        let net = DenseNet::random(&widths, Activation::Silu, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let og: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = net.backward(&x, &og).unwrap();
        prop_assert!(flat(&g).iter().all(|v| v.is_finite()));
    }
}

/// Full-batch AdamW on least squares with a single linear layer.
#[test]
fn convex_probe_loss_decreases_after_warmup() {
    let mut rng = rng_from_seed(7);
    let n = 64;
    let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
    let w_true = [2.0, -3.0, 1.5];
    let y = Array2::from_shape_fn((n, 1), |(r, _)| (0..3).map(|k| w_true[k] * x[[r, k]]).sum::<f64>() + 0.5);
    let mut net = DenseNet::zeros(&[3, 1], Activation::Identity).unwrap();
    let warmup = 20;
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: 5e-3,
        weight_decay: 0.0,
        warmup_steps: warmup,
        ..AdamWConfig::default()
    })
    .unwrap();
    let mut losses = Vec::new();
    for _ in 0..400 {
        let trace = net.forward_trace(x.view()).unwrap();
        let diff = trace.output() - &y;
        losses.push(diff.iter().map(|v| v * v).sum::<f64>() / n as f64);
        let og = diff * (2.0 / n as f64);
        let (grads, _) = net.backward_trace(&trace, og.view()).unwrap();
        opt.step(&mut net, &grads).unwrap();
    }
    let windows: Vec<f64> = losses[warmup as usize..]
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window mean rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn same_seed_gives_identical_optimizer_trajectories() {
    let run = || {
        let mut rng = rng_from_seed(99);
        let mut net = DenseNet::random(&[4, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default()).unwrap();
        let mut trajectory = Vec::new();
        for _ in 0..25 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = net.forward(&x).unwrap();
            let g = net.backward(&x, &out).unwrap();
            opt.step(&mut net, &g).unwrap();
            trajectory.push(flat(&net));
        }
        trajectory
    };
    assert_eq!(run(), run());
}
