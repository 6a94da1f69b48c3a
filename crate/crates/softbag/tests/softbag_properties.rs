use dcmil_core::{Matrix, Tape};
use dcmil_softbag::gradcheck::{tiny_dims, PAPER_WEIGHTS};
use dcmil_softbag::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> C2Model {
    C2Model::new(tiny_dims(), 0.5, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn dense(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn gradient_suite_within_tolerance() {
    for c in gradcheck::gradient_suite(17) {
        assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
    }
}

#[test]
fn projection_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = model(1);
    let g = random(&mut rng, 4, 6);
    let run = |m: &C2Model| {
        let mut t = Tape::new();
        let p = m.bind(&mut t, false);
        let gv = t.constant(g.clone());
        let e = project_bag(&mut t, &p, &m.layout, gv).unwrap();
        t.value(e).clone()
    };
    let (w, b) = (m.layout.proj_w, m.layout.proj_b);
    let want = dense(&g, m.params.value(w));
    let got = run(&m);
    let bias = m.params.value(b).clone();
    for i in 0..4 {
        for j in 0..5 {
            assert!((got.get(i, j) - want.get(i, j) - bias.get(0, j)).abs() < 1e-12);
        }
    }
    *m.params.value_mut(w) = Matrix::zeros(6, 5);
    *m.params.value_mut(b) = Matrix::zeros(1, 5);
    assert_eq!(run(&m), Matrix::zeros(4, 5));
    // Identity-shaped projection on a square model.
    let dims = C2Dims { bag_dim: 6, ..tiny_dims() };
    let mut sq = C2Model::new(dims, 0.5, false, &mut rng).unwrap();
    *sq.params.value_mut(sq.layout.proj_w) = Matrix::identity(6);
    assert_eq!(run(&sq), g);
}

fn select(e: &Matrix, h: &[f64], logits: &Matrix, sel: &[bool], literal: bool) -> Matrix {
    let mut t = Tape::new();
    let (ev, lv) = (t.constant(e.clone()), t.constant(logits.clone()));
    let hv = t.constant(Matrix::column_vector(h));
    let s = select_instances(&mut t, ev, hv, lv, sel, literal).unwrap();
    t.value(s).clone()
}

#[test]
fn selection_reference_cases() {
    let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]);
    let out = select(&e, &[1.0, 1.0], &Matrix::zeros(2, 2), &[true, true], false);
    for r in 0..2 {
        assert!((out.get(r, 0) - 2.0).abs() < 1e-15 && (out.get(r, 1) + 1.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = random(&mut rng, 5, 3);
    let logits = random(&mut rng, 5, 1);
    let out = select(&e, &[0.0, 0.0, 1.0, 0.0, 0.0], &logits, &[false, false, true, false, false], false);
    assert!(out.max_abs_diff(&Matrix::from_vec(1, 3, e.row(2).to_vec())) < 1e-15);
    assert!(select_is_err(&e, &logits));
}

fn select_is_err(e: &Matrix, logits: &Matrix) -> bool {
    let mut t = Tape::new();
    let (ev, lv) = (t.constant(e.clone()), t.constant(logits.clone()));
    let hv = t.constant(Matrix::filled(5, 1, 1.0));
    select_instances(&mut t, ev, hv, lv, &[true, true, false, false, false], false).is_err()
}

#[test]
fn selection_matches_masked_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random(&mut rng, 6, 4);
    let logits = random(&mut rng, 6, 3);
    let sel = [true, false, true, false, false, true];
    let h: Vec<f64> = sel.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let got = select(&e, &h, &logits, &sel, false);
    for slot in 0..3 {
        let idx: Vec<usize> = (0..6).filter(|&i| sel[i]).collect();
        let w = softmax(&idx.iter().map(|&i| logits.get(i, slot)).collect::<Vec<_>>());
        for c in 0..4 {
            let want: f64 = idx.iter().zip(&w).map(|(&i, w)| w * e.get(i, c)).sum();
            assert!((got.get(slot, c) - want).abs() < 1e-12);
        }
    }
    // Literal variant: unselected logits become zero but keep their softmax mass.
    let got = select(&e, &h, &logits, &sel, true);
    for slot in 0..3 {
        let w = softmax(&(0..6).map(|i| h[i] * logits.get(i, slot)).collect::<Vec<_>>());
        for c in 0..4 {
            let want: f64 = (0..6).map(|i| w[i] * h[i] * e.get(i, c)).sum();
            assert!((got.get(slot, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = model(4);
    let e_sel = random(&mut rng, 3, 5);
    let run = |m: &C2Model| {
        let mut t = Tape::new();
        let p = m.bind(&mut t, false);
        let ev = t.constant(e_sel.clone());
        let (b, a) = constrained_self_attention(&mut t, &p, &m.layout, ev);
        let s = sparsity_penalty(&mut t, &p, &m.layout);
        (t.value(b).clone(), t.value(a).clone(), t.scalar(s))
    };
    let (_, a, s) = run(&m);
    for r in 0..3 {
        assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let l1: f64 = [m.layout.wq, m.layout.wk, m.layout.wv]
        .iter()
        .map(|&id| m.params.value(id).data().iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    assert!((s - l1).abs() < 1e-12);

    *m.params.value_mut(m.layout.wq) = Matrix::zeros(5, 3);
    *m.params.value_mut(m.layout.wk) = Matrix::zeros(5, 3);
    let (b, a, _) = run(&m);
    for r in 0..3 {
        for c in 0..3 {
            assert!((a.get(r, c) - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    // Uniform attention: B is the pooling layer applied to the column mean of V.
    let v = dense(&e_sel, m.params.value(m.layout.wv));
    let mean = Matrix::from_fn(1, 3, |_, c| (0..3).map(|r| v.get(r, c)).sum::<f64>() / 3.0);
    let want = dense(&mean, m.params.value(m.layout.pool_w));
    let bias = m.params.value(m.layout.pool_b);
    for c in 0..4 {
        assert!((b.get(0, c) - want.get(0, c) - bias.get(0, c)).abs() < 1e-12);
    }
    *m.params.value_mut(m.layout.wv) = Matrix::zeros(5, 3);
    assert_eq!(run(&m).2, 0.0);
}

#[test]
fn aggregation_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = model(5);
    let agg = |m: &C2Model, x: &Matrix| {
        let mut t = Tape::new();
        let p = m.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let a = aggregate_k(&mut t, &p, &m.layout.k1, xv).unwrap();
        t.value(a).clone()
    };
    let v = random(&mut rng, 1, 4);
    assert!(agg(&m, &v).max_abs_diff(&v) < 1e-15);
    let two = Matrix::from_vec(2, 4, [v.data(), v.data()].concat());
    assert!(agg(&m, &two).max_abs_diff(&v) < 1e-15);
    *m.params.value_mut(m.layout.k1.w) = Matrix::zeros(3, 1);
    let x = random(&mut rng, 5, 4);
    let mean = Matrix::from_fn(1, 4, |_, c| (0..5).map(|r| x.get(r, c)).sum::<f64>() / 5.0);
    assert!(agg(&m, &x).max_abs_diff(&mean) < 1e-12);
    let mut t = Tape::new();
    let p = m.bind(&mut t, false);
    assert!(aggregate_list(&mut t, &p, &m.layout.k1, &[]).is_err());
}

#[test]
fn log_bilinear_matches_triple_inner_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let v: Vec<Vec<f64>> = (0..4).map(|_| random(&mut rng, 1, 4).into_vec()).collect();
        let (w, u) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4));
        let form = |a: &[f64], m: &Matrix, b: &[f64]| -> f64 {
            (0..4).map(|i| (0..4).map(|j| a[i] * m.get(i, j) * b[j]).sum::<f64>()).sum()
        };
        let want = (form(&v[0], &w, &v[1]) + form(&v[0], &w, &v[2]) + form(&v[0], &u, &v[3])).exp();
        let got = log_bilinear(&v[0], &v[1], &v[2], &v[3], &w, &u);
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }
}

#[test]
fn contrastive_loss_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pos: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let negs: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut want = 0.0;
    for n in 0..3 {
        let den = pos[n].exp() + negs[n].iter().map(|x| x.exp()).sum::<f64>();
        want -= (pos[n].exp() / den).ln();
    }
    want /= 3.0;
    assert!((tcl_value(&pos, &negs).unwrap() - want).abs() < 1e-12);
}

#[test]
fn distance_constraint_matches_hand_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut t = Tape::new();
    let mut terms = Vec::new();
    let mut want = 0.0;
    for _ in 0..3 {
        let v: Vec<Vec<f64>> = (0..5).map(|_| random(&mut rng, 1, 4).into_vec()).collect();
        want += (cos(&v[0], &v[4]) - cos(&v[0], &v[1]) + 0.5).max(0.0) + 1.0 - cos(&v[0], &v[2]) + 1.0
            - cos(&v[0], &v[3]);
        let n: Vec<_> = v.iter().map(|x| t.constant(Matrix::row_vector(x))).collect();
        terms.push(AdcTerm {
            b: n[0],
            tilde: n[1],
            hat: n[2],
            bar: n[3],
            under: n[4],
        });
    }
    let mut zeros = 0;
    let l = loss_adc(&mut t, &terms, 0.5, &mut zeros).unwrap();
    assert!((t.scalar(l) - want).abs() < 1e-12);
    assert!(loss_adc(&mut t, &terms, -0.1, &mut zeros).is_err());
}

/// Direct product form of the partial likelihood.
fn cox_oracle(r: &[f64], t: &[f64], d: &[bool]) -> f64 {
    let mut prod = 1.0;
    for n in 0..r.len() {
        if d[n] {
            let den: f64 = (0..r.len()).filter(|&j| t[j] >= t[n]).map(|j| r[j].exp()).sum();
            prod *= r[n].exp() / den;
        }
    }
    -prod.ln()
}

#[test]
fn cox_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let n = rng.random_range(1..=6);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..5u8))).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let got = cox_value(&r, &t, &d).unwrap();
        assert!((got - cox_oracle(&r, &t, &d)).abs() < 1e-10);
    }
}

fn topk_oracle(v: &[f64], k: usize) -> Vec<bool> {
    let mut out = vec![false; v.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if !out[i] && best.is_none_or(|b| v[i] > v[b]) {
                best = Some(i);
            }
        }
        out[best.unwrap()] = true;
    }
    out
}

#[test]
fn noiseless_topk_equals_exact_topk() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=n);
        // Coarse values so ties occur.
        let v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 2.0).collect();
        let mut t = Tape::new();
        let s = t.constant(Matrix::column_vector(&v));
        let top = gumbel_topk(&mut t, s, k, 0.5, None, IndicatorMode::StraightThrough).unwrap();
        assert_eq!(top.hard, topk_oracle(&v, k));
    }
    let mut t = Tape::new();
    let s = t.constant(Matrix::column_vector(&[1.0, 2.0]));
    assert!(gumbel_topk(&mut t, s, 3, 0.5, None, IndicatorMode::Relaxed).is_err());
}

#[test]
fn bag_is_permutation_invariant_without_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = model(11);
    for n in [2usize, 3, 7] {
        let g = random(&mut rng, n, 6);
        let a = infer_bag(&m, &g).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let gp = Matrix::from_fn(n, 6, |r, c| g.get(perm[r], c));
        let b = infer_bag(&m, &gp).unwrap();
        assert!((a.risk - b.risk).abs() < 1e-6);
        for (x, y) in a.b.iter().zip(&b.b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn risk_is_inner_product_with_risk_weights() {
    let mut m = model(12);
    let w = m.params.value(m.layout.w_s).clone();
    let run = |m: &C2Model, b: &[f64]| {
        let mut t = Tape::new();
        let p = m.bind(&mut t, false);
        let bv = t.constant(Matrix::row_vector(b));
        let r = infer_risk(&mut t, &p, &m.layout, bv);
        t.scalar(r)
    };
    for k in 0..4 {
        let mut e = vec![0.0; 4];
        e[k] = 1.0;
        assert_eq!(run(&m, &e), w.get(k, 0));
    }
    let b = [0.3, -1.2, 0.5, 2.0];
    let want: f64 = (0..4).map(|k| b[k] * w.get(k, 0)).sum();
    assert!((run(&m, &b) - want).abs() < 1e-14);
    *m.params.value_mut(m.layout.w_s) = Matrix::zeros(4, 1);
    assert_eq!(run(&m, &b), 0.0);
}

fn batch_bags<'a>(gs: &'a [Matrix], roles: &[BagRole]) -> Vec<BatchBag<'a>> {
    gs.iter()
        .zip(roles)
        .enumerate()
        .map(|(i, (g, &role))| BatchBag {
            g,
            role,
            time: 10.0 + 7.0 * i as f64,
            event: i % 2 == 0,
        })
        .collect()
}

#[test]
fn batch_requires_same_source_partners() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = model(13);
    let gs: Vec<Matrix> = (0..4).map(|_| random(&mut rng, 5, 6)).collect();
    let opts = || ObjectiveOptions {
        weights: PAPER_WEIGHTS,
        mode: IndicatorMode::StraightThrough,
        noise: None,
        with_grads: false,
    };
    let bad = [BagRole::Labeled(1), BagRole::Labeled(0), BagRole::Labeled(0), BagRole::Normal];
    assert!(batch_objective(&m, &batch_bags(&gs, &bad), &[], opts()).is_err());
    let good = [BagRole::Labeled(1), BagRole::Labeled(1), BagRole::Labeled(0), BagRole::Labeled(0)];
    let step = batch_objective(&m, &batch_bags(&gs, &good), &[], opts()).unwrap();
    assert!(step.tcl >= 0.0 && step.adc >= 0.0 && step.cox >= 0.0);
    let want = loss_c2(step.cox, step.tcl, step.adc, step.sparsity, &PAPER_WEIGHTS).unwrap();
    assert!((step.loss - want).abs() < 1e-12);
    let cox_only = [BagRole::Unlabeled; 4];
    let step = batch_objective(&m, &batch_bags(&gs, &cox_only), &[], opts()).unwrap();
    assert_eq!((step.tcl, step.adc), (0.0, 0.0));
}

#[test]
fn checkpoint_and_indicator_export() {
    let m = model(14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c2.json");
    save_checkpoint(&path, &m, "h1").unwrap();
    assert_eq!(load_checkpoint(&path, Some("h1")).unwrap(), m);
    assert!(load_checkpoint(&path, Some("h2")).is_err());
    let g = random(&mut ChaCha8Rng::seed_from_u64(14), 5, 6);
    let inf = infer_bag(&m, &g).unwrap();
    let csv_path = dir.path().join("ind.csv");
    write_indicator_csv(&csv_path, &[("T0001", &inf)]).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "patient_id,instance_index,score,selected");
    assert_eq!(lines.len(), 6);
    let selected: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(selected, 3);
}

// ---- Mutual-information bound on an enumerable toy ----

struct Toy {
    pb: Vec<f64>,
    /// p(c_j | b) for the three context variables.
    cond: Vec<Vec<Vec<f64>>>,
    pc: Vec<Vec<f64>>,
}

impl Toy {
    fn new(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Self {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let pb = norm((0..k).map(|_| rng.random_range(0.1..1.1)).collect());
        let cond: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| {
                (0..k)
                    .map(|_| norm((0..m).map(|_| rng.random_range(0.0f64..1.0).powi(3) + 0.01).collect()))
                    .collect()
            })
            .collect();
        let pc = cond
            .iter()
            .map(|t| (0..m).map(|c| (0..k).map(|b| pb[b] * t[b][c]).sum()).collect())
            .collect();
        Self { pb, cond, pc }
    }

    fn log_ratio(&self, j: usize, b: usize, c: usize) -> f64 {
        (self.cond[j][b][c] / self.pc[j][c]).ln()
    }

    fn mi_sum(&self) -> f64 {
        let (k, m) = (self.pb.len(), self.pc[0].len());
        let mut total = 0.0;
        for j in 0..3 {
            for b in 0..k {
                for c in 0..m {
                    total += self.pb[b] * self.cond[j][b][c] * self.log_ratio(j, b, c);
                }
            }
        }
        total
    }
}

fn compositions(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for i in 0..=n {
        for mut rest in compositions(n - i, k - 1) {
            rest.insert(0, i);
            out.push(rest);
        }
    }
    out
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Exact expectation of the contrastive loss with the true density ratios as
/// scores: positives from the joint, negatives i.i.d. from the marginal, and
/// the normal context drawn independently of everything else.
fn expected_tcl(toy: &Toy, n: usize) -> f64 {
    let (k, m) = (toy.pb.len(), toy.pc[0].len());
    let comps = compositions(n - 1, k);
    let mut total = 0.0;
    for x0 in 0..k {
        for c1 in 0..m {
            for c2 in 0..m {
                for c3 in 0..m {
                    let pj = toy.pb[x0] * toy.cond[0][x0][c1] * toy.cond[1][x0][c2] * toy.cond[2][x0][c3];
                    let score = |x: usize, first: usize| toy.log_ratio(0, x, first) + toy.log_ratio(1, x, c2) + toy.log_ratio(2, x, c3);
                    let pos = score(x0, c1);
                    for cu in 0..m {
                        for comp in &comps {
                            let ln_p = ln_factorial(n - 1)
                                + (0..k)
                                    .map(|s| comp[s] as f64 * toy.pb[s].ln() - ln_factorial(comp[s]))
                                    .sum::<f64>();
                            let negs: Vec<f64> = (0..k)
                                .flat_map(|s| std::iter::repeat_n(score(s, cu), comp[s]))
                                .collect();
                            let l = tcl_value(&[pos], &[negs]).unwrap();
                            total += pj * toy.pc[0][cu] * ln_p.exp() * l;
                        }
                    }
                }
            }
        }
    }
    total
}

#[test]
fn contrastive_loss_lower_bounds_mutual_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..6 {
        let toy = Toy::new(&mut rng, 4, 2);
        let mi = toy.mi_sum();
        for n in [2usize, 4, 8] {
            let slack = mi - ((n as f64).ln() - expected_tcl(&toy, n));
            assert!(slack >= 0.0, "trial {trial}, N={n}: slack {slack}");
        }
    }
    assert_eq!(tcl_value(&[2.5], &[vec![]]).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cox_is_shift_invariant(
        r in proptest::collection::vec(-3.0f64..3.0, 1..10),
        shift in -50.0f64..50.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = r.iter().map(|_| f64::from(rng.random_range(1..6u8))).collect();
        let d: Vec<bool> = r.iter().map(|_| rng.random_bool(0.7)).collect();
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let a = cox_value(&r, &t, &d).unwrap();
        let b = cox_value(&shifted, &t, &d).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn contrastive_loss_is_nonnegative(
        pos in proptest::collection::vec(-5.0f64..5.0, 1..5),
        neg in proptest::collection::vec(-5.0f64..5.0, 0..4),
    ) {
        let negs = vec![neg.clone(); pos.len()];
        let v = tcl_value(&pos, &negs).unwrap();
        prop_assert!(v >= 0.0);
        if neg.is_empty() {
            prop_assert_eq!(v, 0.0);
        }
    }
}
