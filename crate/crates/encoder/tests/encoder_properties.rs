use dcmil_core::{Matrix, Tape, Tile};
use dcmil_encoder::gradcheck::{random_pyramid, tiny_dims};
use dcmil_encoder::*;
use dcmil_survival::mc_dropout_uncertainty;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> C1Model {
    C1Model::new(tiny_dims(), 0.4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn gradient_suite_within_tolerance() {
    for c in gradcheck::gradient_suite(11) {
        assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
    }
}

#[test]
fn structural_loss_matches_flattened_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = model(3);
    for (_, v) in m.branches[2].iter_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    // Independent oracle: walk parameter names shared by both branches in the constrained blocks.
    let mut expected = 0.0;
    for s in 1..3 {
        let mut sq = 0.0;
        for (name, a) in m.branches[s].iter() {
            let Some(rest) = name.strip_prefix("block") else { continue };
            let b: usize = rest.split('.').next().unwrap().parse().unwrap();
            if b < s {
                let c = m.branches[s - 1].get(name).unwrap();
                sq += a.data().iter().zip(c.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
        expected += sq.sqrt();
    }
    let out = m.structural_objective(3, 1.0).unwrap();
    assert!((out.loss - expected).abs() < 1e-10 * expected.max(1.0));
    assert!((m.structural_value(3) - expected).abs() < 1e-10 * expected.max(1.0));
}

#[test]
fn structural_descent_step_reduces_the_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = model(5);
    for (_, v) in m.branches[1].iter_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let before = m.structural_value(3);
    let out = m.structural_objective(3, 1.0).unwrap();
    for (p, g) in m.branches.iter_mut().zip(&out.grads) {
        let names: Vec<String> = p.names().to_vec();
        for n in names {
            let step = g.get(&n).unwrap().scale(-1e-2);
            p.get_mut(&n).unwrap().add_assign(&step);
        }
    }
    assert!(m.structural_value(3) < before);
}

#[test]
fn shared_branches_have_zero_structural_term() {
    let mut m = model(6);
    m.share_first_branch();
    assert_eq!(m.structural_value(3), 0.0);
}

#[test]
fn aggregation_matches_dense_oracle() {
    let dims = tiny_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, l) = init_branch(&dims, 0, &mut rng);
    let z = Matrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
    let mut t = Tape::new();
    let b = p.bind_frozen(&mut t);
    let zv = t.constant(z.clone());
    let (g, a) = aggregate_tokens(&mut t, &b, &l, zv, None).unwrap();

    let get = |n: &str| p.get(n).unwrap().clone();
    let (lg, lb, w1, b1, w2, b2) = (get("agg.ln.g"), get("agg.ln.b"), get("agg.w1"), get("agg.b1"), get("agg.w2"), get("agg.b2"));
    let mut scores = Vec::new();
    for r in 0..5 {
        let row = z.row(r);
        let mu = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0;
        let n: Vec<f64> = (0..8)
            .map(|k| (row[k] - mu) / (var + 1e-5).sqrt() * lg.get(0, k) + lb.get(0, k))
            .collect();
        let h: Vec<f64> = (0..w1.cols())
            .map(|j| ((0..8).map(|k| n[k] * w1.get(k, j)).sum::<f64>() + b1.get(0, j)).tanh())
            .collect();
        scores.push((0..h.len()).map(|j| h[j] * w2.get(j, 0)).sum::<f64>() + b2.get(0, 0));
    }
    let mx = scores.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let tot: f64 = e.iter().sum();
    for r in 0..5 {
        assert!((t.value(a).get(0, r) - e[r] / tot).abs() < 1e-12);
    }
    for k in 0..8 {
        let want: f64 = (0..5).map(|r| e[r] / tot * z.get(r, k)).sum();
        assert!((t.value(g).get(0, k) - want).abs() < 1e-12);
    }
}

#[test]
fn token_permutation_with_permuted_positions_is_invariant() {
    let dims = tiny_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (p, l) = init_branch(&dims, 0, &mut rng);
    let n = dims.n_tokens(0);
    let x = Matrix::from_fn(n, 8, |_, _| rng.random_range(-1.0..1.0));
    let perm: Vec<usize> = (0..n).rev().collect();
    let xp = Matrix::from_fn(n, 8, |r, c| x.get(perm[r], c));
    let run = |input: &Matrix| {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let v = t.constant(input.clone());
        let z = transformer_forward(&mut t, &b, &l, dims.n_heads, v, &mut Dropout::off());
        let (g, _) = aggregate_tokens(&mut t, &b, &l, z, None).unwrap();
        let zm = t.value(z).clone();
        (t.value(g).clone(), zm)
    };
    let (g, z) = run(&x);
    let (gp, zp) = run(&xp);
    assert!(g.max_abs_diff(&gp) < 1e-10);
    for r in 0..n {
        for c in 0..8 {
            assert!((zp.get(r, c) - z.get(perm[r], c)).abs() < 1e-10);
        }
    }
}

#[test]
fn class_probabilities_sum_to_one() {
    let m = model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let r = m.encode(&random_pyramid(&mut rng)).unwrap();
        assert_eq!(r.p.len(), 3);
        for p in &r.p {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(p[1] > 0.0 && p[1] < 1.0);
        }
        assert_eq!(r.g_final().len(), 8);
    }
}

#[test]
fn constant_tile_encodes_finitely() {
    let m = model(14);
    let tiles = vec![
        Tile::filled(16, 0.5).unwrap(),
        Tile::filled(32, 0.5).unwrap(),
        Tile::filled(64, 0.5).unwrap(),
    ];
    let p = dcmil_core::TilePyramid::new(tiles, (0, 0)).unwrap();
    let r = m.encode(&p).unwrap();
    assert!(r.g.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn missing_magnification_is_rejected() {
    let m = model(15);
    let p = dcmil_core::TilePyramid::new(vec![Tile::filled(16, 0.1).unwrap()], (0, 0)).unwrap();
    assert!(m.encode(&p).is_err());
    assert!(m.high_risk_probs(&p, 1, &mut Dropout::off()).is_ok());
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let m = model(16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c1.json");
    save_checkpoint(&path, &m, "abc").unwrap();
    let back = load_checkpoint(&path, Some("abc")).unwrap();
    assert_eq!(back, m);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = random_pyramid(&mut rng);
    assert_eq!(back.encode(&p).unwrap(), m.encode(&p).unwrap());
    assert!(load_checkpoint(&path, Some("other")).is_err());
}

#[test]
fn zero_dropout_gives_zero_spread() {
    let m = model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bag: Vec<_> = (0..3).map(|_| random_pyramid(&mut rng)).collect();
    let r = mc_dropout_uncertainty(&m, &bag, 10, 0.0, &mut rng).unwrap();
    assert!(r.per_instance_std.iter().all(|&s| s == 0.0));
    let r = mc_dropout_uncertainty(&m, &bag, 10, 0.5, &mut rng).unwrap();
    assert!(r.per_instance_std.iter().any(|&s| s > 0.0));
}

#[test]
fn pace_admits_everything_at_the_end() {
    let losses = [0.9, 0.1, 0.4, 0.3];
    let s = PaceSchedule::from_losses(&losses, 0.25, 5);
    let mut prev = 0;
    for e in 0..5 {
        let n = self_paced_select(&losses, s.lambda(e)).len();
        assert!(n >= prev);
        prev = n;
    }
    assert_eq!(prev, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_hinge_bounds(a in 0.01f64..0.99, b in 0.01f64..0.99, eta in 0.0f64..0.5, y in 0u8..2) {
        let r = ranking(a, b, y, eta);
        prop_assert!(r >= 0.0);
        // A finer branch that is at least as confident in the true class never pays more than the margin.
        let better = if y == 1 { a >= b } else { a <= b };
        if better {
            prop_assert!(r <= eta + 1e-12);
        }
        let gain = if y == 1 { (a / b).ln() } else { ((1.0 - a) / (1.0 - b)).ln() };
        prop_assert!((r - (eta - gain).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_is_identity(side_pow in 4u32..7, seed in 0u64..1000) {
        let side = 1usize << side_pow;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tile = Tile::new(side, (0..side * side).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        let mask = SaliencyMask::all_ones(side / 16);
        prop_assert_eq!(highlight_input(&tile, Some(&mask)).unwrap(), tile);
    }
}
