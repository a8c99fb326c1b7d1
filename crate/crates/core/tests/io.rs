use proptest::prelude::*;

use diffrouter::datagen::{generate, Family, InstanceSpec};
use diffrouter::io::{load_checkpoint, load_instance, save_checkpoint, save_edge_file, save_eval_file, CheckpointMeta};
use diffrouter::netcore::{Activation, ParamSet};
use diffrouter::router::{DomainId, RouterConfig, RouterParams, Variant};
use diffrouter::seed::rng_from_seed;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Silu), Just(Activation::Tanh), Just(Activation::Identity)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_any_layout(
        d in 1usize..5,
        k in 2usize..5,
        hidden in prop::collection::vec(1usize..12, 1..4),
        act in activation(),
        bridge in any::<bool>(),
        mark in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = RouterConfig {
            hidden,
            activation: act,
            zero_output: false,
            variant: if bridge { Variant::Bridge } else { Variant::Diffusion },
            ..RouterConfig::new(d, k, 17)
        };
        let mut params = RouterParams::new(cfg, &mut rng_from_seed(seed)).unwrap();
        if mark {
            params.mark_direct(DomainId(k - 1), DomainId(0));
        }
        let meta = CheckpointMeta { schedule_hash: "s".into(), topology_hash: "t".into() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&path, &params, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back_meta, meta);
        prop_assert_eq!(back.config(), params.config());
        prop_assert_eq!(back.direct_pairs(), params.direct_pairs());
        let (a, b) = (params.param_slices().concat(), back.param_slices().concat());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(*y, *x as f32 as f64);
        }
    }
}

#[test]
fn instances_reload_from_their_files() {
    for family in [Family::GaussianAffine, Family::MoonsWarp] {
        let mut spec = InstanceSpec::chain(family, 4, 2, 40, 9);
        spec.m = 25;
        let inst = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // Edge files in reverse order: slots come from the edge label.
        let mut edges = Vec::new();
        for e in (0..inst.datasets.len()).rev() {
            let p = dir.path().join(format!("e{e}.bin"));
            save_edge_file(&p, &inst, e).unwrap();
            edges.push(p);
        }
        let eval = dir.path().join("eval.bin");
        save_eval_file(&eval, &inst).unwrap();
        let back = load_instance(&edges, &eval).unwrap();
        assert_eq!(back.spec, inst.spec);
        assert_eq!(back.topology, inst.topology);
        assert_eq!(back.gaussian.is_some(), family == Family::GaussianAffine);
        for (a, b) in back.datasets.iter().zip(&inst.datasets) {
            assert_eq!(a.edge, b.edge);
            assert_eq!(a.first, b.first.mapv(|v| v as f32 as f64));
            assert_eq!(a.second, b.second.mapv(|v| v as f32 as f64));
        }
        for k in 0..4 {
            let (a, b) = (back.eval.domain(DomainId(k)).unwrap(), inst.eval.domain(DomainId(k)).unwrap());
            assert_eq!(a, &b.mapv(|v| v as f32 as f64));
        }
        // A missing edge is an error, not a silent gap.
        assert!(load_instance(&edges[1..], &eval).is_err());
    }
}
