//! Loss values against independent brute-force oracles, plus the
//! hand-derivable special cases.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reid_core::gradcheck::{central_diff_grad, max_rel_error};
use reid_core::graph::Graph;
use reid_core::losses::{
    eval_on, loss_i2t, loss_i2tce, loss_id, loss_stage1, loss_stage2, loss_t2i,
    loss_t2i_multipos, loss_t2ice_averaged, loss_triplet, BatchLabels, SmoothedTarget,
    Stage2Weights,
};
use reid_core::params::{GradStore, ParamStore};
use reid_core::tensor::Tensor;

// ---------------------------------------------------------------------------
// brute-force oracles (plain loops, no tape)
// ---------------------------------------------------------------------------

fn brute_i2t(s: &Tensor) -> f64 {
    let b = s.rows;
    (0..b)
        .map(|i| {
            let denom: f64 = (0..b).map(|a| s.at(i, a).exp()).sum();
            -(s.at(i, i).exp() / denom).ln()
        })
        .sum::<f64>()
        / b as f64
}

fn brute_t2i(s: &Tensor) -> f64 {
    brute_i2t(&s.transpose())
}

/// Eq-as-printed oracle: outer average over positives kept even though the
/// summand does not depend on p.
fn brute_t2i_multipos(s: &Tensor, ids: &[usize]) -> f64 {
    let b = ids.len();
    let mut distinct: Vec<usize> = Vec::new();
    for &y in ids {
        if !distinct.contains(&y) {
            distinct.push(y);
        }
    }
    let mut total = 0.0;
    for &y in &distinct {
        let col = ids.iter().position(|&v| v == y).unwrap();
        let positives: Vec<usize> = (0..b).filter(|&p| ids[p] == y).collect();
        let num: f64 = positives.iter().map(|&p| s.at(p, col).exp()).sum();
        let den: f64 = (0..b).map(|a| s.at(a, col).exp()).sum();
        let mut acc = 0.0;
        for _p in &positives {
            acc += -(num / den).ln();
        }
        total += acc / positives.len() as f64;
    }
    total / distinct.len() as f64
}

fn brute_smoothed_ce(scores: &[f64], y: usize, eps: f64) -> f64 {
    let n = scores.len();
    let denom: f64 = scores.iter().map(|v| v.exp()).sum();
    (0..n)
        .map(|k| {
            let q = if k == y { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
            let p = scores[k].exp() / denom;
            -q * p.ln()
        })
        .sum()
}

/// Exhaustive triplet oracle: enumerate every (anchor, positive, negative)
/// combination and reduce to batch-hard by max/min.
fn brute_triplet(features: &Tensor, ids: &[usize], margin: f64) -> f64 {
    let b = ids.len();
    let dist = |i: usize, j: usize| -> f64 {
        let acc: f64 = (0..features.cols)
            .map(|c| {
                let d = features.at(i, c) - features.at(j, c);
                d * d
            })
            .sum();
        (acc + 1e-12).sqrt()
    };
    let mut total = 0.0;
    for a in 0..b {
        let mut dp = f64::NEG_INFINITY;
        let mut dn = f64::INFINITY;
        for p in 0..b {
            if p != a && ids[p] == ids[a] {
                dp = dp.max(dist(a, p));
            }
        }
        for n in 0..b {
            if ids[n] != ids[a] {
                dn = dn.min(dist(a, n));
            }
        }
        total += (dp - dn + margin).max(0.0);
    }
    total / b as f64
}

fn uniform(b: usize, v: f64) -> Tensor {
    Tensor::from_vec(b, b, vec![v; b * b])
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(rows, cols, 1.0, &mut rng)
}

// ---------------------------------------------------------------------------
// contrastive losses
// ---------------------------------------------------------------------------

#[test]
fn i2t_special_cases() {
    assert_eq!(eval_on(&uniform(1, 0.3), loss_i2t).unwrap(), 0.0);
    let v = eval_on(&uniform(4, 1.7), loss_i2t).unwrap();
    assert!((v - 4.0_f64.ln()).abs() < 1e-12);
    let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let v = eval_on(&eye, loss_i2t).unwrap();
    assert!((v - (1.0 + (-1.0_f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn t2i_special_cases() {
    let v = eval_on(&uniform(3, -0.4), loss_t2i).unwrap();
    assert!((v - 3.0_f64.ln()).abs() < 1e-12);
    let s2 = Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
    let v = eval_on(&s2, loss_t2i).unwrap();
    assert!((v - (1.0 + (-2.0_f64).exp()).ln()).abs() < 1e-12);

    // symmetric matrix: both directions agree
    let mut s = random_matrix(5, 5, 1);
    for i in 0..5 {
        for j in 0..i {
            let m = s.at(i, j);
            *s.at_mut(j, i) = m;
        }
    }
    let a = eval_on(&s, loss_i2t).unwrap();
    let b = eval_on(&s, loss_t2i).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn contrastive_losses_match_oracle_on_random_instances() {
    for seed in 0..20 {
        let s = random_matrix(6, 6, seed);
        let a = eval_on(&s, loss_i2t).unwrap();
        assert!((a - brute_i2t(&s)).abs() < 1e-12);
        let b = eval_on(&s, loss_t2i).unwrap();
        assert!((b - brute_t2i(&s)).abs() < 1e-12);
    }
}

#[test]
fn non_square_rejected() {
    let s = random_matrix(3, 4, 2);
    assert!(eval_on(&s, loss_i2t).is_err());
}

#[test]
fn multipos_collapses_to_t2i_for_unique_ids() {
    let s = random_matrix(5, 5, 3);
    let labels = BatchLabels::from_ids(vec![4, 2, 0, 1, 3]);
    let a = eval_on(&s, |g, v| loss_t2i_multipos(g, v, &labels)).unwrap();
    let b = eval_on(&s, loss_t2i).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn multipos_uniform_case() {
    // ids [0,0,1,1], all similarities equal: -log(2/4) = ln 2 per id
    let labels = BatchLabels::from_ids(vec![0, 0, 1, 1]);
    let v = eval_on(&uniform(4, 0.9), |g, s| loss_t2i_multipos(g, s, &labels)).unwrap();
    assert!((v - 2.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn multipos_matches_printed_formula_oracle() {
    // ids [0,0,1]; columns are the anchors of each image's identity
    let s = Tensor::from_vec(3, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let ids = vec![0usize, 0, 1];
    let labels = BatchLabels::from_ids(ids.clone());
    let got = eval_on(&s, |g, v| loss_t2i_multipos(g, v, &labels)).unwrap();
    assert!((got - brute_t2i_multipos(&s, &ids)).abs() < 1e-12);

    for seed in 10..25 {
        let s = random_matrix(6, 6, seed);
        let ids = vec![0usize, 1, 1, 2, 0, 2];
        let labels = BatchLabels::from_ids(ids.clone());
        let got = eval_on(&s, |g, v| loss_t2i_multipos(g, v, &labels)).unwrap();
        assert!((got - brute_t2i_multipos(&s, &ids)).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// classification losses
// ---------------------------------------------------------------------------

#[test]
fn id_loss_special_cases() {
    // uniform scores: loss = ln N for any epsilon (q sums to 1)
    for eps in [0.0, 0.1, 0.5] {
        let t = SmoothedTarget::new(10, 3, eps).unwrap();
        let v = eval_on(&Tensor::from_vec(1, 10, vec![0.7; 10]), |g, s| {
            loss_id(g, s, core::slice::from_ref(&t))
        })
        .unwrap();
        assert!((v - 10.0_f64.ln()).abs() < 1e-12, "eps {eps}");
    }

    // eps = 0, p = (0.9, 0.1), y = 0: loss = -ln 0.9
    let scores = Tensor::from_vec(1, 2, vec![0.9_f64.ln(), 0.1_f64.ln()]);
    let t = SmoothedTarget::new(2, 0, 0.0).unwrap();
    let v = eval_on(&scores, |g, s| loss_id(g, s, core::slice::from_ref(&t))).unwrap();
    assert!((v + 0.9_f64.ln()).abs() < 1e-12);

    // eps = 0.1, uniform p over 2 classes: ln 2
    let t = SmoothedTarget::new(2, 1, 0.1).unwrap();
    let v = eval_on(&Tensor::from_vec(1, 2, vec![0.0, 0.0]), |g, s| {
        loss_id(g, s, core::slice::from_ref(&t))
    })
    .unwrap();
    assert!((v - 2.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn id_loss_matches_oracle() {
    for seed in 0..20 {
        let s = random_matrix(1, 7, 100 + seed);
        let y = (seed % 7) as usize;
        let t = SmoothedTarget::new(7, y, 0.1).unwrap();
        let got = eval_on(&s, |g, v| loss_id(g, v, core::slice::from_ref(&t))).unwrap();
        assert!((got - brute_smoothed_ce(s.row(0), y, 0.1)).abs() < 1e-12);
    }
}

#[test]
fn smoothed_target_invariants() {
    let t = SmoothedTarget::new(5, 2, 0.1).unwrap();
    assert!((t.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // true class keeps the largest mass for eps < (N-1)/N
    let argmax = t.q.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    assert_eq!(argmax, 2);
    assert!(SmoothedTarget::new(5, 2, 1.0).is_err());
    assert!(SmoothedTarget::new(5, 2, -0.1).is_err());
}

#[test]
fn i2tce_special_cases() {
    let t = SmoothedTarget::new(3, 1, 0.0).unwrap();
    let v = eval_on(&Tensor::from_vec(1, 3, vec![0.2; 3]), |g, s| {
        loss_i2tce(g, s, core::slice::from_ref(&t), 3)
    })
    .unwrap();
    assert!((v - 3.0_f64.ln()).abs() < 1e-12);

    // saturated row: gap 20 drives the loss below 1e-8
    let t = SmoothedTarget::new(3, 0, 0.0).unwrap();
    let v = eval_on(&Tensor::from_vec(1, 3, vec![20.0, 0.0, 0.0]), |g, s| {
        loss_i2tce(g, s, core::slice::from_ref(&t), 3)
    })
    .unwrap();
    assert!(v < 1e-8);

    // smoothing case against the oracle
    let row = [2.0, 0.0, 0.0];
    let t = SmoothedTarget::new(3, 0, 0.1).unwrap();
    let v = eval_on(&Tensor::from_vec(1, 3, row.to_vec()), |g, s| {
        loss_i2tce(g, s, core::slice::from_ref(&t), 3)
    })
    .unwrap();
    assert!((v - brute_smoothed_ce(&row, 0, 0.1)).abs() < 1e-12);

    // wrong anchor count is a contract violation
    let t = SmoothedTarget::new(3, 0, 0.0).unwrap();
    assert!(eval_on(&Tensor::from_vec(1, 3, row.to_vec()), |g, s| {
        loss_i2tce(g, s, core::slice::from_ref(&t), 5)
    })
    .is_err());
}

// ---------------------------------------------------------------------------
// triplet loss
// ---------------------------------------------------------------------------

#[test]
fn triplet_margin_arithmetic() {
    // satisfied margin: dp = 0.2, dn >= 0.5 everywhere
    let f = Tensor::from_vec(4, 1, vec![0.0, 0.2, 0.7, 0.9]);
    let ids = [0usize, 0, 1, 1];
    let v = eval_on(&f, |g, feat| loss_triplet(g, feat, &ids, 0.3)).unwrap();
    assert!(v.abs() < 1e-9);

    // violated: dp = 0.5, dn = 0.2 for every anchor -> 0.6 each
    let f = Tensor::from_vec(4, 1, vec![0.0, 0.5, 0.2, 0.7]);
    let v = eval_on(&f, |g, feat| loss_triplet(g, feat, &ids, 0.3)).unwrap();
    assert!((v - 0.6).abs() < 1e-6, "got {v}");
}

#[test]
fn triplet_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..30 {
        let b = 4 + 2 * (case % 5); // even batch sizes 4..12
        let ids: Vec<usize> = (0..b).map(|i| (i / 2) % 3).collect();
        let f = Tensor::randn(b, 2, 1.0, &mut rng);
        let got = eval_on(&f, |g, feat| loss_triplet(g, feat, &ids, 0.3)).unwrap();
        let want = brute_triplet(&f, &ids, 0.3);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn triplet_needs_pos_and_neg() {
    let f = random_matrix(3, 2, 9);
    assert!(eval_on(&f, |g, feat| loss_triplet(g, feat, &[0, 0, 0], 0.3)).is_err());
    assert!(eval_on(&f, |g, feat| loss_triplet(g, feat, &[0, 1, 2], 0.3)).is_err());
}

// ---------------------------------------------------------------------------
// stage totals
// ---------------------------------------------------------------------------

#[test]
fn stage1_cases() {
    let labels1 = BatchLabels::from_ids(vec![0]);
    let v = eval_on(&uniform(1, 0.0), |g, s| loss_stage1(g, s, &labels1)).unwrap();
    assert_eq!(v, 0.0);

    let labels4 = BatchLabels::from_ids(vec![0, 1, 2, 3]);
    let v = eval_on(&uniform(4, 0.5), |g, s| loss_stage1(g, s, &labels4)).unwrap();
    assert!((v - 2.0 * 4.0_f64.ln()).abs() < 1e-12);

    let s = random_matrix(4, 4, 77);
    let ids = vec![0usize, 0, 1, 1];
    let labels = BatchLabels::from_ids(ids.clone());
    let total = eval_on(&s, |g, v| loss_stage1(g, v, &labels)).unwrap();
    let parts = brute_i2t(&s) + brute_t2i_multipos(&s, &ids);
    assert!((total - parts).abs() < 1e-12);
}

#[test]
fn stage2_weighting() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(3.0));
    let w = Stage2Weights { id: 1.0, tri: 1.0, i2tce: 1.0 };
    let v = loss_stage2(&mut g, &w, a, b, c).unwrap();
    assert_eq!(g.value(v).item(), 6.0);

    let a = g.constant(Tensor::scalar(4.0));
    let z = g.constant(Tensor::scalar(0.0));
    let v = loss_stage2(&mut g, &Stage2Weights::vit(), a, z, z).unwrap();
    assert_eq!(g.value(v).item(), 1.0);

    assert!(Stage2Weights { id: -1.0, tri: 1.0, i2tce: 1.0 }.validate().is_err());
}

#[test]
fn zero_weight_term_contributes_no_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(2.0));
    let q = store.add("q", Tensor::scalar(3.0));
    let mut grads = GradStore::for_store(&store);
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    let qv = g.param(q);
    let w = Stage2Weights { id: 0.0, tri: 1.0, i2tce: 1.0 };
    let zero = g.constant(Tensor::scalar(0.0));
    let total = loss_stage2(&mut g, &w, pv, qv, zero).unwrap();
    g.backward(total, &mut grads);
    assert_eq!(grads.get(p).unwrap().item(), 0.0);
    assert_eq!(grads.get(q).unwrap().item(), 1.0);
}

// ---------------------------------------------------------------------------
// averaged-feature stage-1 loss (appendix shortcut)
// ---------------------------------------------------------------------------

#[test]
fn t2ice_averaged_cases() {
    let v = eval_on(&Tensor::from_vec(1, 1, vec![0.8]), |g, s| {
        loss_t2ice_averaged(g, s, 0, 1)
    })
    .unwrap();
    assert_eq!(v, 0.0);

    let v = eval_on(&Tensor::from_vec(1, 5, vec![0.3; 5]), |g, s| {
        loss_t2ice_averaged(g, s, 2, 5)
    })
    .unwrap();
    assert!((v - 5.0_f64.ln()).abs() < 1e-12);

    // 3-identity case against a direct softmax evaluation
    let col = [1.2, -0.3, 0.4];
    let v = eval_on(&Tensor::from_vec(3, 1, col.to_vec()), |g, s| {
        loss_t2ice_averaged(g, s, 1, 3)
    })
    .unwrap();
    let denom: f64 = col.iter().map(|x| x.exp()).sum();
    let want = -(col[1].exp() / denom).ln();
    assert!((v - want).abs() < 1e-12);
}

// ---------------------------------------------------------------------------
// gradients and properties
// ---------------------------------------------------------------------------

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    for case in 0..10u64 {
        let mut store = ParamStore::new();
        let s_id = store.add("s", Tensor::randn(4, 4, 1.0, &mut rng));
        let f_id = store.add("f", Tensor::randn(6, 3, 1.0, &mut rng));
        const IDS: [usize; 6] = [0, 0, 1, 1, 2, 2];
        let labels = BatchLabels::from_ids(vec![0, 0, 1, 1]);
        let t: Vec<SmoothedTarget> =
            (0..4).map(|r| SmoothedTarget::new(4, r % 4, 0.1).unwrap()).collect();

        type Builder = Box<dyn Fn(&mut Graph, reid_core::graph::Var, reid_core::graph::Var) -> reid_core::graph::Var>;
        let labels2 = labels.clone();
        let t2 = t.clone();
        let builders: Vec<Builder> = vec![
            Box::new(|g, s, _| loss_i2t(g, s).unwrap()),
            Box::new(|g, s, _| loss_t2i(g, s).unwrap()),
            Box::new(move |g, s, _| loss_t2i_multipos(g, s, &labels2).unwrap()),
            Box::new(move |g, s, _| loss_id(g, s, &t2).unwrap()),
            Box::new(|g, _, f| loss_triplet(g, f, &IDS, 0.3).unwrap()),
        ];
        for (k, build) in builders.iter().enumerate() {
            let run = |store: &ParamStore| {
                let mut g = Graph::new(store);
                let s = g.param(s_id);
                let f = g.param(f_id);
                let l = build(&mut g, s, f);
                g.value(l).item()
            };
            let mut grads = GradStore::for_store(&store);
            {
                let mut g = Graph::new(&store);
                let s = g.param(s_id);
                let f = g.param(f_id);
                let l = build(&mut g, s, f);
                g.backward(l, &mut grads);
            }
            for id in [s_id, f_id] {
                let numeric = central_diff_grad(&mut store, id, 1e-5, &mut |s| run(s));
                let analytic = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(numeric.rows, numeric.cols));
                let err = max_rel_error(&analytic.data, &numeric.data);
                assert!(err < 1e-6, "case {case} loss {k} rel err {err}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Permuting the batch leaves every scalar loss unchanged.
    #[test]
    fn losses_are_permutation_equivariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 6;
        let mut s = Tensor::randn(b, b, 1.0, &mut rng);
        let f = Tensor::randn(b, 3, 1.0, &mut rng);
        let ids = vec![0usize, 0, 1, 1, 2, 2];
        // same-identity columns hold the same text anchor, so duplicate them
        for j in 0..b {
            let first = ids.iter().position(|&v| v == ids[j]).unwrap();
            for r in 0..b {
                let v = s.at(r, first);
                *s.at_mut(r, j) = v;
            }
        }
        // a fixed derangement of the batch
        let perm = [3usize, 5, 0, 4, 1, 2];

        let mut sp = Tensor::zeros(b, b);
        let mut fp = Tensor::zeros(b, 3);
        let mut idsp = vec![0usize; b];
        for (new, &old) in perm.iter().enumerate() {
            idsp[new] = ids[old];
            for c in 0..3 {
                *fp.at_mut(new, c) = f.at(old, c);
            }
            for (new_c, &old_c) in perm.iter().enumerate() {
                *sp.at_mut(new, new_c) = s.at(old, old_c);
            }
        }

        let labels = BatchLabels::from_ids(ids.clone());
        let labelsp = BatchLabels::from_ids(idsp.clone());
        let a1 = eval_on(&s, loss_i2t).unwrap();
        let a2 = eval_on(&sp, loss_i2t).unwrap();
        prop_assert!((a1 - a2).abs() < 1e-9);
        let b1 = eval_on(&s, |g, v| loss_t2i_multipos(g, v, &labels)).unwrap();
        let b2 = eval_on(&sp, |g, v| loss_t2i_multipos(g, v, &labelsp)).unwrap();
        prop_assert!((b1 - b2).abs() < 1e-9);
        let c1 = eval_on(&f, |g, v| loss_triplet(g, v, &ids, 0.3)).unwrap();
        let c2 = eval_on(&fp, |g, v| loss_triplet(g, v, &idsp, 0.3)).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9);
    }

    /// Losses are non-negative on arbitrary inputs.
    #[test]
    fn losses_are_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::randn(5, 5, 2.0, &mut rng);
        prop_assert!(eval_on(&s, loss_i2t).unwrap() >= 0.0);
        prop_assert!(eval_on(&s, loss_t2i).unwrap() >= 0.0);
        let f = Tensor::randn(6, 4, 1.0, &mut rng);
        let ids = vec![0usize, 0, 1, 1, 2, 2];
        prop_assert!(eval_on(&f, |g, v| loss_triplet(g, v, &ids, 0.3)).unwrap() >= 0.0);
    }
}
