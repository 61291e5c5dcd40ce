use detdisc_core::gradcheck::{make_fixture, run_grad_check, GradCheckConfig};
use detdisc_core::repr::{init_repr, Activation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_gradient_matches_central_differences() {
    let report = run_grad_check(&GradCheckConfig::default()).unwrap();
    assert_eq!(report.results.len(), 20 * 5);
    for (target, worst) in report.worst_by_target() {
        assert!(
            worst.max_rel_error < 1e-4,
            "{target}: {:.3e} at {} (fixture {})",
            worst.max_rel_error,
            worst.worst_param,
            worst.fixture
        );
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 2, 3] {
        let cfg = GradCheckConfig {
            seed,
            fixtures: 5,
            ..Default::default()
        };
        assert!(run_grad_check(&cfg).unwrap().passed(), "seed {seed}");
    }
}

#[test]
fn fixtures_cover_every_objective_shape() {
    let fx = make_fixture(0, 0, 0, None).unwrap();
    assert!(!fx.dataset.strong_bags.is_empty());
    assert!(!fx.dataset.weak_bags.is_empty());
    assert!(fx
        .dataset
        .categories_strong
        .intersection(&fx.dataset.categories_weak)
        .next()
        .is_some());
}

// straight-line re-evaluation of a two-layer stack
fn reference_forward(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], x: &[f64], h: usize, o: usize) -> Vec<f64> {
    let d = x.len();
    let mut hidden = vec![0.0; h];
    for i in 0..h {
        let mut z = b1[i];
        for j in 0..d {
            z += w1[i * d + j] * x[j];
        }
        hidden[i] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = vec![0.0; o];
    for i in 0..o {
        let mut z = b2[i];
        for j in 0..h {
            z += w2[i * h + j] * hidden[j];
        }
        out[i] = z;
    }
    out
}

#[test]
fn forward_matches_reference_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let mut p = init_repr(trial, &[4, 6, 3], &[Activation::RectifiedLinear, Activation::Identity]).unwrap();
        for layer in &mut p.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let want = reference_forward(
            &p.layers[0].weight,
            &p.layers[0].bias,
            &p.layers[1].weight,
            &p.layers[1].bias,
            &x,
            6,
            3,
        );
        let got = p.forward(&x).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}
