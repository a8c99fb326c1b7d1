use proptest::prelude::*;

use diffrouter::schedules::{
    build_bridge_schedule, build_bridge_schedule_scaled, build_diffusion_schedule, DiffusionSchedule, Schedule,
    ScheduleProfile,
};

fn profile() -> impl Strategy<Value = ScheduleProfile> {
    prop_oneof![Just(ScheduleProfile::Linear), Just(ScheduleProfile::Cosine)]
}

proptest! {
    #[test]
    fn diffusion_tables_are_variance_preserving_and_monotone(
        steps in 2usize..1500,
        profile in profile(),
        eta in 0.0f64..=1.0,
    ) {
        let sch = build_diffusion_schedule(steps, profile).unwrap().with_eta(eta).unwrap();
        prop_assert_eq!(sch.a_table().len(), steps + 1);
        for t in 0..=steps {
            let vp = sch.a(t).powi(2) + sch.sigma(t).powi(2);
            prop_assert!((vp - 1.0).abs() <= 1e-9, "t={} a^2+s^2={}", t, vp);
        }
        for t in 1..=steps {
            prop_assert!(sch.a(t) < sch.a(t - 1));
            prop_assert!(sch.sigma(t) > sch.sigma(t - 1));
            let omega = sch.jump_std(t, t - 1).unwrap();
            prop_assert!(omega >= 0.0);
            if t > 1 {
                prop_assert!(omega < sch.sigma(t - 1), "t={} omega={} sigma={}", t, omega, sch.sigma(t - 1));
            } else {
                prop_assert_eq!(omega, 0.0);
            }
        }
    }

    #[test]
    fn strided_jumps_keep_a_real_mean_coefficient(
        steps in 10usize..400,
        eta in 0.0f64..=1.0,
        frac in 0.05f64..1.0,
    ) {
        let sch = build_diffusion_schedule(steps, ScheduleProfile::Linear).unwrap().with_eta(eta).unwrap();
        let t = ((steps as f64 * frac).ceil() as usize).clamp(2, steps);
        let s = t / 2;
        let omega = sch.jump_std(t, s).unwrap();
        prop_assert!(omega <= sch.sigma(s));
    }

    #[test]
    fn bridge_tables_hit_both_endpoints(steps in 1usize..1500, scale in 0.1f64..3.0) {
        let b = build_bridge_schedule_scaled(steps, scale).unwrap();
        prop_assert!((b.alpha(0) - 1.0).abs() <= 1e-9 && b.beta(0).abs() <= 1e-9);
        prop_assert!(b.alpha(steps).abs() <= 1e-9 && (b.beta(steps) - 1.0).abs() <= 1e-9);
        prop_assert!(b.sigma(0).abs() <= 1e-9 && b.sigma(steps).abs() <= 1e-9);
        for t in 0..=steps {
            prop_assert!(b.sigma(t) >= 0.0);
            prop_assert!((b.alpha(t) + b.beta(t) - 1.0).abs() <= 1e-12);
        }
        for t in 1..=steps {
            prop_assert!(b.step_std(t).unwrap() >= 0.0);
        }
    }
}

#[test]
fn rebuilding_gives_bitwise_identical_tables() {
    for profile in [ScheduleProfile::Linear, ScheduleProfile::Cosine] {
        let a = build_diffusion_schedule(1000, profile).unwrap();
        let b = build_diffusion_schedule(1000, profile).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.a_table()), bits(b.a_table()));
        assert_eq!(bits(a.sigma_table()), bits(b.sigma_table()));
    }
}

#[test]
fn linear_endpoints_do_not_depend_on_step_count() {
    let ends: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|&t| build_diffusion_schedule(t, ScheduleProfile::Linear).unwrap().a(t))
        .collect();
    for e in &ends {
        assert!((e - ends[0]).abs() < 1e-12, "{ends:?}");
        assert!(*e <= 1e-2);
    }
}

#[test]
fn fingerprint_ignores_eta_but_not_layout() {
    let base = Schedule::Diffusion(build_diffusion_schedule(100, ScheduleProfile::Linear).unwrap());
    let noisy = base.clone().with_eta(1.0).unwrap();
    assert_eq!(base.fingerprint(), noisy.fingerprint());
    let cosine = Schedule::Diffusion(build_diffusion_schedule(100, ScheduleProfile::Cosine).unwrap());
    let longer = Schedule::Diffusion(build_diffusion_schedule(200, ScheduleProfile::Linear).unwrap());
    let bridge = Schedule::Bridge(build_bridge_schedule(100).unwrap());
    let prints = [base.fingerprint(), cosine.fingerprint(), longer.fingerprint(), bridge.fingerprint()];
    for i in 0..prints.len() {
        assert_eq!(prints[i].len(), 16);
        for j in i + 1..prints.len() {
            assert_ne!(prints[i], prints[j]);
        }
    }
}

#[test]
fn invalid_requests_are_rejected() {
    assert!(build_diffusion_schedule(0, ScheduleProfile::Linear).is_err());
    assert!(build_bridge_schedule(0).is_err());
    assert!(Schedule::Diffusion(build_diffusion_schedule(10, ScheduleProfile::Linear).unwrap())
        .with_eta(-0.5)
        .is_err());
    assert!(DiffusionSchedule::from_name(10, "sigmoid").is_err());
    assert!(DiffusionSchedule::from_name(10, "cosine").is_ok());
}
