//! Finite-difference checks for every backward rule on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reid_core::gradcheck::{central_diff_grad, max_rel_error, DEFAULT_STEP};
use reid_core::graph::{Graph, Im2colSpec, Var};
use reid_core::params::{GradStore, ParamId, ParamStore};
use reid_core::tensor::Tensor;

const TOL: f64 = 1e-7;

/// Build a store with named random params, run `build` to get a scalar
/// loss, and compare tape gradients against central differences for
/// every parameter.
fn check(shapes: &[(usize, usize)], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), Tensor::randn(r, c, 0.5, &mut rng)))
        .collect();

    let run = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut grads = GradStore::for_store(&store);
    {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss, &mut grads);
    }

    for &id in &ids {
        let numeric = central_diff_grad(&mut store, id, DEFAULT_STEP, &mut |s| run(s));
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(numeric.rows, numeric.cols));
        let err = max_rel_error(&analytic.data, &numeric.data);
        assert!(err < TOL, "param {} rel error {err}", id.0);
    }
}

#[test]
fn grad_matmul_add_sub_mul() {
    check(&[(3, 4), (4, 2), (3, 2), (3, 2)], |g, v| {
        let mm = g.matmul(v[0], v[1]);
        let s = g.sub(mm, v[2]);
        let m = g.mul(s, v[3]);
        let a = g.add(m, v[2]);
        g.mean_all(a)
    });
}

#[test]
fn grad_row_broadcast_scale_addconst() {
    check(&[(5, 3), (1, 3)], |g, v| {
        let x = g.add_row_broadcast(v[0], v[1]);
        let x = g.scale(x, 1.7);
        let x = g.add_const(x, -0.3);
        g.sum_all(x)
    });
}

#[test]
fn grad_softmax_and_log_softmax() {
    check(&[(4, 6)], |g, v| {
        let s = g.softmax_rows(v[0]);
        let l = g.log_softmax_rows(v[0]);
        let m = g.mul(s, l);
        g.mean_all(m)
    });
}

#[test]
fn grad_layer_norm() {
    check(&[(4, 8), (1, 8), (1, 8)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        let sq = g.mul(y, y);
        g.mean_all(sq)
    });
}

#[test]
fn grad_quick_gelu_relu_sqrt() {
    check(&[(3, 5)], |g, v| {
        let a = g.quick_gelu(v[0]);
        let b = g.relu(v[0]);
        let c = g.mul(a, b);
        let c = g.mul(c, c);
        let c = g.sqrt_eps(c, 1e-8);
        g.sum_all(c)
    });
}

#[test]
fn grad_slices_and_concats() {
    check(&[(6, 4), (2, 4)], |g, v| {
        let top = g.slice_rows(v[0], 0, 2);
        let bottom = g.slice_rows(v[0], 4, 6);
        let cat = g.concat_rows(&[top, v[1], bottom]);
        let left = g.slice_cols(cat, 0, 2);
        let right = g.slice_cols(cat, 2, 4);
        let wide = g.concat_cols(&[right, left]);
        g.mean_all(wide)
    });
}

#[test]
fn grad_gather_rows_with_duplicates() {
    check(&[(5, 3)], |g, v| {
        let picked = g.gather_rows(v[0], &[0, 2, 2, 4]);
        let sq = g.mul(picked, picked);
        g.sum_all(sq)
    });
}

#[test]
fn grad_gather_elems() {
    check(&[(4, 4)], |g, v| {
        let diag = g.gather_elems(v[0], &[(0, 0), (1, 1), (2, 2), (3, 3), (1, 3)]);
        let sq = g.mul(diag, diag);
        g.mean_all(sq)
    });
}

#[test]
fn grad_reductions_and_lse() {
    check(&[(3, 4)], |g, v| {
        let mr = g.mean_rows(v[0]);
        let lse = g.log_sum_exp_all(v[0]);
        let s = g.sum_all(mr);
        g.add(s, lse)
    });
}

#[test]
fn grad_l2_normalize_rows() {
    check(&[(3, 5), (3, 5)], |g, v| {
        let a = g.l2_normalize_rows(v[0]);
        let b = g.l2_normalize_rows(v[1]);
        let prod = g.mul(a, b);
        g.sum_all(prod)
    });
}

#[test]
fn grad_transpose() {
    check(&[(3, 4), (3, 4)], |g, v| {
        let t = g.transpose(v[0]);
        let mm = g.matmul(t, v[1]);
        g.mean_all(mm)
    });
}

#[test]
fn grad_im2col_stride_and_pad() {
    let spec = Im2colSpec { h: 5, w: 4, channels: 2, kernel: 3, stride: 2, pad: 1 };
    check(&[(20, 2), (18, 3)], move |g, v| {
        let cols = g.im2col(v[0], spec);
        let mm = g.matmul(cols, v[1]);
        let act = g.relu(mm);
        g.mean_all(act)
    });
}

#[test]
fn im2col_token_counts() {
    // Non-overlapping vs overlapping tiling of a 32x32 grid.
    let tight = Im2colSpec { h: 32, w: 32, channels: 3, kernel: 8, stride: 8, pad: 0 };
    assert_eq!(tight.out_h() * tight.out_w(), 16);
    let olp = Im2colSpec { h: 32, w: 32, channels: 3, kernel: 8, stride: 4, pad: 0 };
    assert_eq!(olp.out_h() * olp.out_w(), 49);
}

#[test]
fn param_used_twice_accumulates() {
    check(&[(3, 3)], |g, v| {
        let mm = g.matmul(v[0], v[0]);
        g.sum_all(mm)
    });
}
