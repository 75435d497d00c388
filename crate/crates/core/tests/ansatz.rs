use latentpde::ansatz::*;
use latentpde::spectral::{EquationKind, Grid1D};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn specs() -> Vec<AnsatzSpec> {
    vec![
        AnsatzSpec::default_for(EquationKind::ViscidBurgers, 2.0),
        AnsatzSpec::default_for(EquationKind::KuramotoSivashinsky, 64.0),
        AnsatzSpec::default_for(EquationKind::Kdv, 32.0),
    ]
}

fn random_theta(spec: &AnsatzSpec, seed: u64) -> Vec<f64> {
    spec.init_theta(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn table_counts() {
    let counts: Vec<usize> = specs().iter().map(|s| s.num_params()).collect();
    assert_eq!(counts, [84, 188, 313]);
}

#[test]
fn realizable_target_is_recovered() {
    let spec = AnsatzSpec::default_for(EquationKind::ViscidBurgers, 2.0);
    let grid = Grid1D::new(-1.0, 2.0, 64).unwrap();
    let ansatz = Ansatz::new(spec.clone()).unwrap();
    let mut snaps = Vec::new();
    for seed in 0..3 {
        snaps.extend(ansatz.eval_grid(&random_theta(&spec, 100 + seed), &grid).unwrap());
    }
    // The landscape is non-convex; keep the best of a few restarts per snapshot.
    let mut best = [f64::INFINITY; 3];
    for seed in 1..=6 {
        let cfg = AutoDecoderConfig {
            steps: 30_000,
            lr: 3e-2,
            lr_decay: 0.6,
            steps_per_decay: 2000,
            batch: 3,
            seed,
        };
        let fit = fit_auto_decoder(&snaps, &grid, &spec, &cfg).unwrap();
        for (b, r) in best.iter_mut().zip(&fit.rel_rmse) {
            *b = b.min(r.unwrap());
        }
    }
    for r in best {
        assert!(r < 1e-3, "relRMSE {r}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn periodic_in_the_domain_length(which in 0usize..3, seed in 0u64..1000, x in -50.0f64..50.0) {
        let spec = specs()[which].clone();
        let a = Ansatz::new(spec.clone()).unwrap();
        let theta = random_theta(&spec, seed);
        let l = spec.domain_length;
        let v = a.eval_points(&theta, &[x, x + l]).unwrap();
        prop_assert!((v[0] - v[1]).abs() < 1e-12 * v[0].abs().max(1.0));
    }

    #[test]
    fn flatten_round_trips(which in 0usize..3, seed in 0u64..1000) {
        let spec = specs()[which].clone();
        let theta = ThetaVector::new(random_theta(&spec, seed), spec.clone()).unwrap();
        let w = unflatten(&theta).unwrap();
        let back = flatten(&w, &spec).unwrap();
        prop_assert_eq!(&back.values, &theta.values);
        prop_assert_eq!(unflatten(&back).unwrap(), w);
    }

    #[test]
    fn theta_gradient_matches_finite_differences(which in 0usize..3, seed in 0u64..1000, x in -20.0f64..20.0) {
        let spec = specs()[which].clone();
        let a = Ansatz::new(spec.clone()).unwrap();
        let theta = random_theta(&spec, seed);
        let mut grad = vec![0.0; theta.len()];
        a.backward_points(&theta, &[x], &[1.0], &mut grad).unwrap();
        let h = 1e-5;
        for i in (0..theta.len()).step_by(7) {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (a.eval_points(&tp, &[x]).unwrap()[0] - a.eval_points(&tm, &[x]).unwrap()[0]) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            if scale > 1e-6 {
                prop_assert!((fd - grad[i]).abs() / scale < 1e-5, "entry {}: {} vs {}", i, grad[i], fd);
            }
        }
    }

    #[test]
    fn batched_equals_pointwise(seed in 0u64..1000) {
        let spec = specs()[1].clone();
        let a = Ansatz::new(spec.clone()).unwrap();
        let theta = random_theta(&spec, seed);
        let grid = Grid1D::new(0.0, 64.0, 32).unwrap();
        let batched = a.eval_grid(&theta, &grid).unwrap();
        let tv = ThetaVector::new(theta, spec).unwrap();
        for (i, x) in grid.points().iter().enumerate() {
            prop_assert!((batched[i] - tv.evaluate_at(*x)).abs() < 1e-14);
        }
    }

    #[test]
    fn phases_are_two_pi_periodic(which in 0usize..3, seed in 0u64..1000, k in 0usize..3) {
        let spec = specs()[which].clone();
        let a = Ansatz::new(spec.clone()).unwrap();
        let theta = random_theta(&spec, seed);
        let phases: Vec<usize> = a
            .layout()
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Phases)
            .flat_map(|s| s.range())
            .collect();
        let mut shifted = theta.clone();
        shifted[phases[k % phases.len()]] += std::f64::consts::TAU;
        let xs = [0.3, -1.7, 5.0];
        let (p, q) = (a.eval_points(&theta, &xs).unwrap(), a.eval_points(&shifted, &xs).unwrap());
        for (u, v) in p.iter().zip(&q) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }
}
