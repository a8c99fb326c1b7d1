use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

use diffrouter::datagen::{GaussianInstance, GaussianOracle, Topology};
use diffrouter::metrics::wasserstein_1d;
use diffrouter::router::{DomainId, RouterConfig, RouterParams, ZeroPredictor};
use diffrouter::sample::{route_path, translate, translate_with, Mode, TranslationRequest};
use diffrouter::schedules::{build_bridge_schedule, build_diffusion_schedule, Schedule, ScheduleProfile};
use diffrouter::seed::{normal_matrix, rng_from_seed};
use diffrouter::Error;

/// Random labelled tree: each node after the first attaches to an earlier one.
fn random_tree(k: usize, seed: u64) -> Topology {
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let edges = (1..k)
        .map(|i| (DomainId(order[rng.random_range(0..i)]), DomainId(order[i])))
        .collect();
    Topology::new(k, edges, None).unwrap()
}

fn simple_paths(topo: &Topology, from: usize, to: usize) -> Vec<Vec<usize>> {
    fn walk(topo: &Topology, path: &mut Vec<usize>, to: usize, out: &mut Vec<Vec<usize>>) {
        let here = *path.last().unwrap();
        if here == to {
            out.push(path.clone());
            return;
        }
        for &next in topo.neighbors(DomainId(here)) {
            if !path.contains(&next) {
                path.push(next);
                walk(topo, path, to, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(topo, &mut vec![from], to, &mut out);
    out
}

fn zero(d: usize, k: usize) -> ZeroPredictor {
    ZeroPredictor {
        data_dim: d,
        num_domains: k,
    }
}

fn request(x: Array2<f64>, src: usize, tgt: usize, mode: Mode, steps: Option<usize>, eta: f64, seed: u64) -> TranslationRequest {
    TranslationRequest {
        x_src: x,
        src: DomainId(src),
        tgt: DomainId(tgt),
        mode,
        steps,
        eta,
        seed,
    }
}

fn diffusion(steps: usize) -> Schedule {
    Schedule::Diffusion(build_diffusion_schedule(steps, ScheduleProfile::Linear).unwrap())
}

proptest! {
    #[test]
    fn route_is_the_unique_simple_path(k in 2usize..=6, seed in any::<u64>()) {
        let topo = random_tree(k, seed);
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let paths = simple_paths(&topo, a, b);
                prop_assert_eq!(paths.len(), 1);
                let route: Vec<usize> = route_path(&topo, DomainId(a), DomainId(b)).unwrap().iter().map(|d| d.0).collect();
                prop_assert_eq!(&route, &paths[0]);
            }
        }
    }

    #[test]
    fn total_steps_follow_the_hop_count(
        k in 3usize..=6,
        seed in any::<u64>(),
        steps in 1usize..=20,
        mode_direct in any::<bool>(),
    ) {
        let topo = random_tree(k, seed);
        let sch = diffusion(20);
        let mut rng = rng_from_seed(seed ^ 1);
        let a = rng.random_range(0..k);
        let b = (a + rng.random_range(1..k)) % k;
        let mode = if mode_direct { Mode::Direct } else { Mode::Indirect };
        let req = request(Array2::zeros((2, 1)), a, b, mode, Some(steps), 1.0, seed);
        let out = translate_with(&zero(1, k), &req, &topo, &sch).unwrap();
        let hops = match mode {
            Mode::Direct => 1,
            Mode::Indirect => topo.distance(DomainId(a), DomainId(b)).unwrap(),
        };
        prop_assert_eq!(out.total_steps, hops * steps);
        prop_assert_eq!(out.steps_per_hop, steps);
        prop_assert_eq!(out.path.len(), hops + 1);
        prop_assert_eq!(out.intermediates.len(), hops - 1);
    }
}

#[test]
fn same_seed_gives_bitwise_identical_translations() {
    let topo = Topology::star(3).unwrap();
    let mut rng = rng_from_seed(3);
    let params = RouterParams::new(
        RouterConfig {
            hidden: vec![16, 16],
            zero_output: false,
            ..RouterConfig::new(2, 3, 50)
        },
        &mut rng,
    )
    .unwrap();
    let x = normal_matrix(20, 2, &mut rng);
    let sch = diffusion(50);
    for eta in [0.0, 1.0] {
        let run = |seed| {
            let req = request(x.clone(), 1, 2, Mode::Indirect, None, eta, seed);
            translate(&params, &req, &topo, &sch).unwrap().x_tgt
        };
        let bits = |a: Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(run(7)), bits(run(7)));
        if eta > 0.0 {
            assert_ne!(bits(run(7)), bits(run(8)));
        }
    }
}

/// With the exact score of a 1-D gaussian instance, translated samples follow
/// the target marginal when sources follow the source marginal.
#[test]
fn oracle_translation_preserves_the_target_marginal() {
    let g = GaussianInstance::standard(2, 1, 1).unwrap();
    let sch = build_diffusion_schedule(100, ScheduleProfile::Linear).unwrap();
    let oracle = GaussianOracle::new(g.clone(), sch.clone()).unwrap();
    let topo = Topology::star(2).unwrap();
    let n = 5000;
    let mut rng = rng_from_seed(21);
    let sources = g.sample_tuples(n, &mut rng).swap_remove(0);
    let req = request(sources, 0, 1, Mode::Direct, None, 1.0, 5);
    let out = translate_with(&oracle, &req, &topo, &Schedule::Diffusion(sch)).unwrap();
    let mut produced: Vec<f64> = out.x_tgt.index_axis(Axis(1), 0).to_vec();
    let sd = g.marginal_cov(DomainId(1)).unwrap()[(0, 0)].sqrt();
    let mean = g.maps()[1].offset[0];
    let mut exact: Vec<f64> = normal_matrix(n, 1, &mut rng).iter().map(|z| mean + sd * z).collect();
    let w2 = wasserstein_1d(&mut produced, &mut exact).unwrap();
    assert!(w2 < 0.05, "marginal W2 {w2}");
}

#[test]
fn direct_mode_needs_a_finetuned_direction() {
    let topo = Topology::star(3).unwrap();
    let mut params = RouterParams::zeros(RouterConfig::new(2, 3, 10)).unwrap();
    let sch = diffusion(10);
    let req = request(Array2::zeros((1, 2)), 1, 2, Mode::Direct, None, 1.0, 0);
    match translate(&params, &req, &topo, &sch) {
        Err(Error::Refused(msg)) => assert!(msg.contains("indirect")),
        other => panic!("expected refusal, got {:?}", other.map(|r| r.total_steps)),
    }
    // Adjacent pairs are always direct.
    let adjacent = request(Array2::zeros((1, 2)), 0, 2, Mode::Direct, None, 1.0, 0);
    assert_eq!(translate(&params, &adjacent, &topo, &sch).unwrap().total_steps, 10);
    params.mark_direct(DomainId(1), DomainId(2));
    assert_eq!(translate(&params, &req, &topo, &sch).unwrap().total_steps, 10);
}

#[test]
fn malformed_requests_are_rejected() {
    let topo = Topology::star(3).unwrap();
    let sch = diffusion(10);
    let pred = zero(2, 3);
    let same = request(Array2::zeros((1, 2)), 1, 1, Mode::Indirect, None, 1.0, 0);
    assert!(translate_with(&pred, &same, &topo, &sch).is_err());
    let wide = request(Array2::zeros((1, 3)), 1, 2, Mode::Indirect, None, 1.0, 0);
    assert!(matches!(translate_with(&pred, &wide, &topo, &sch), Err(Error::DimensionMismatch { .. })));
    let too_many = request(Array2::zeros((1, 2)), 1, 2, Mode::Indirect, Some(11), 1.0, 0);
    assert!(translate_with(&pred, &too_many, &topo, &sch).is_err());
    let bridge = Schedule::Bridge(build_bridge_schedule(10).unwrap());
    let strided = request(Array2::zeros((1, 2)), 1, 2, Mode::Indirect, Some(5), 1.0, 0);
    assert!(translate_with(&pred, &strided, &topo, &bridge).is_err());
    let mut diffusion_router = RouterParams::zeros(RouterConfig::new(2, 3, 10)).unwrap();
    diffusion_router.mark_direct(DomainId(1), DomainId(2));
    let ok = request(Array2::zeros((1, 2)), 1, 2, Mode::Indirect, None, 1.0, 0);
    assert!(matches!(translate(&diffusion_router, &ok, &topo, &bridge), Err(Error::InvalidConfig(_))));
}
