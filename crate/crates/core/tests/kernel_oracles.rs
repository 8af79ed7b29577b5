mod common;

use blrp::attention::{theta_cross_l, theta_cross_x, theta_self, AttentionParams};
use blrp::latent::phi;
use blrp::params::{Init, ParamStore};
use blrp::{BoolMask, Tape};
use common::*;
use rand::Rng;

const INSTANCES: usize = 100;
const TOL: f64 = 1e-9;

/// A random block whose norms and biases are also randomized, so that the
/// affine paths are exercised.
fn random_block(seed: u64, d: usize, h_ff: usize, heads: usize, cross: bool) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, &mut Init::new(seed), "blk", d, h_ff, heads, cross).unwrap();
    let mut g = rng(seed ^ 0x55);
    for id in 0..store.len() {
        let name = store.name(id).to_string();
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v += g.gen_range(-0.3..0.3);
            }
        }
    }
    (store, p)
}

struct Shape {
    d: usize,
    heads: usize,
    rows: usize,
    keys: usize,
}

fn random_shape(g: &mut rand_chacha::ChaCha8Rng) -> Shape {
    let heads = g.gen_range(1..=3);
    Shape { d: heads * g.gen_range(1..=4), heads, rows: g.gen_range(1..=6), keys: g.gen_range(1..=7) }
}

fn random_valid(g: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut v: Vec<bool> = (0..n).map(|_| g.gen_bool(0.7)).collect();
    let keep = g.gen_range(0..n);
    v[keep] = true;
    v
}

#[test]
fn matmul_matches_triple_loop_up_to_16() {
    let mut g = rng(1);
    for _ in 0..INSTANCES {
        let (n, k, m) = (g.gen_range(1..=16), g.gen_range(1..=16), g.gen_range(1..=16));
        let a = random_m(&mut g, n, k, 2.0);
        let b = random_m(&mut g, k, m, 2.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(to_tensor(&a)), tape.leaf(to_tensor(&b)));
        let c = tape.matmul(va, vb).unwrap();
        assert!(max_diff(&to_m(tape.value(c)), &matmul(&a, &b)) < 1e-12);
    }
}

#[test]
fn random_5x7_times_7x3() {
    let mut g = rng(2);
    let a = random_m(&mut g, 5, 7, 1.0);
    let b = random_m(&mut g, 7, 3, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(to_tensor(&a)), tape.leaf(to_tensor(&b)));
    let c = tape.matmul(va, vb).unwrap();
    assert!(max_diff(&to_m(tape.value(c)), &matmul(&a, &b)) < 1e-12);
}

#[test]
fn theta_self_matches_reference() {
    let mut g = rng(3);
    for i in 0..INSTANCES {
        let s = random_shape(&mut g);
        let (store, p) = random_block(i as u64, s.d, 2 * s.d, s.heads, false);
        let x = random_m(&mut g, s.rows, s.d, 1.5);
        let valid = random_valid(&mut g, s.rows);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vx = tape.leaf(to_tensor(&x));
        let out = theta_self(&mut tape, &bound, &p, vx, &BoolMask::keys(s.rows, valid.clone())).unwrap();
        let expected = BlockRef::from_store(&store, "blk", s.heads).apply(&x, None, &valid);
        assert!(max_diff(&to_m(tape.value(out)), &expected) < TOL, "instance {i}");
    }
}

#[test]
fn theta_cross_x_matches_reference() {
    let mut g = rng(4);
    for i in 0..INSTANCES {
        let s = random_shape(&mut g);
        let (store, p) = random_block(100 + i as u64, s.d, 3 * s.d, s.heads, true);
        let x = random_m(&mut g, s.rows, s.d, 1.5);
        let kv = random_m(&mut g, s.keys, s.d, 1.5);
        let valid = random_valid(&mut g, s.keys);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (vx, vkv) = (tape.leaf(to_tensor(&x)), tape.leaf(to_tensor(&kv)));
        let out = theta_cross_x(&mut tape, &bound, &p, vx, vkv, &valid).unwrap();
        let expected = BlockRef::from_store(&store, "blk", s.heads).apply(&x, Some(&kv), &valid);
        assert!(max_diff(&to_m(tape.value(out)), &expected) < TOL, "instance {i}");
    }
}

#[test]
fn theta_cross_l_matches_reference() {
    let mut g = rng(5);
    for i in 0..INSTANCES {
        let s = random_shape(&mut g);
        let (store, p) = random_block(200 + i as u64, s.d, s.d + 1, s.heads, true);
        let latent = random_m(&mut g, s.rows, s.d, 1.5);
        let kv = random_m(&mut g, s.keys, s.d, 1.5);
        let valid = random_valid(&mut g, s.keys);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (vl, vkv) = (tape.leaf(to_tensor(&latent)), tape.leaf(to_tensor(&kv)));
        let out = theta_cross_l(&mut tape, &bound, &p, vl, vkv, &valid).unwrap();
        let expected = BlockRef::from_store(&store, "blk", s.heads).apply(&latent, Some(&kv), &valid);
        assert!(max_diff(&to_m(tape.value(out)), &expected) < TOL, "instance {i}");
    }
}

#[test]
fn phi_matches_reference() {
    let mut g = rng(6);
    for i in 0..INSTANCES {
        let (n, d, l) = (g.gen_range(1..=12), g.gen_range(1..=6), g.gen_range(1..=5));
        let x = random_m(&mut g, n, d, 2.0);
        let w = random_m(&mut g, d, l, 2.0);
        let valid = random_valid(&mut g, n);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(to_tensor(&x)), tape.leaf(to_tensor(&w)));
        let out = phi(&mut tape, vx, vw, &valid).unwrap();
        assert!(max_diff(&to_m(tape.value(out)), &common::phi(&x, &w, &valid)) < TOL, "instance {i}");
    }
}

#[test]
fn phi_random_6x4_to_3_within_1e_12() {
    let mut g = rng(7);
    let x = random_m(&mut g, 6, 4, 1.0);
    let w = random_m(&mut g, 4, 3, 1.0);
    let valid = vec![true; 6];
    let mut tape = Tape::new();
    let (vx, vw) = (tape.leaf(to_tensor(&x)), tape.leaf(to_tensor(&w)));
    let out = phi(&mut tape, vx, vw, &valid).unwrap();
    assert!(max_diff(&to_m(tape.value(out)), &common::phi(&x, &w, &valid)) < 1e-12);
}

/// Hand-derived closed form for t=2, d=2, one head, with identity projections
/// and the feed-forward path zeroed: LN of a 2-vector (a, b) with a ≠ b is
/// (±s, ∓s) where s = |a−b|/2 / sqrt((a−b)²/4 + eps).
#[test]
fn theta_self_closed_form_t2_d2() {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, &mut Init::new(0), "blk", 2, 2, 1, false).unwrap();
    for id in [p.w_q, p.w_k, p.w_v, p.w_o] {
        *store.get_mut(id) = blrp::Tensor::identity(2);
    }
    for id in [p.ffn_in, p.ffn_out] {
        *store.get_mut(id) = blrp::Tensor::zeros(2, 2);
    }
    let x = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
    let s = |a: f64, b: f64| {
        let half = (a - b) / 2.0;
        half / (half * half + 1e-5).sqrt()
    };
    // Normalized rows: row0 = (s, -s) with s = s(1,0); row1 = (-u, u) with u = s(3,0).
    let (s0, s1) = (s(1.0, 0.0), s(3.0, 0.0));
    let n0 = [s0, -s0];
    let n1 = [-s1, s1];
    let dot = |a: &[f64; 2], b: &[f64; 2]| (a[0] * b[0] + a[1] * b[1]) / 2.0_f64.sqrt();
    let mut expected = Vec::new();
    for (xi, qi) in x.iter().zip([n0, n1]) {
        let (e0, e1) = (dot(&qi, &n0).exp(), dot(&qi, &n1).exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        expected.push(vec![xi[0] + w0 * n0[0] + w1 * n1[0], xi[1] + w0 * n0[1] + w1 * n1[1]]);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vx = tape.leaf(to_tensor(&x));
    let out = theta_self(&mut tape, &bound, &p, vx, &BoolMask::all(2, 2)).unwrap();
    assert!(max_diff(&to_m(tape.value(out)), &expected) < 1e-9);
}

#[test]
fn masked_keys_equal_deleted_keys() {
    let mut g = rng(8);
    for i in 0..20 {
        let (store, p) = random_block(300 + i, 6, 8, 2, true);
        let x = random_m(&mut g, 3, 6, 1.0);
        let kv = random_m(&mut g, 5, 6, 1.0);
        let valid = vec![true, false, true, false, true];
        let kept: M = kv.iter().zip(&valid).filter(|(_, &v)| v).map(|(r, _)| r.clone()).collect();
        let run = |kv: &M, valid: &[bool]| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let (vx, vkv) = (tape.leaf(to_tensor(&x)), tape.leaf(to_tensor(kv)));
            let out = theta_cross_x(&mut tape, &bound, &p, vx, vkv, valid).unwrap();
            to_m(tape.value(out))
        };
        assert!(max_diff(&run(&kv, &valid), &run(&kept, &[true; 3])) < 1e-9);
    }
}

#[test]
fn single_key_row_gets_full_weight() {
    let (store, p) = random_block(9, 4, 4, 2, true);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(to_tensor(&random_m(&mut rng(9), 3, 4, 1.0)));
    let kv = tape.leaf(to_tensor(&random_m(&mut rng(10), 1, 4, 1.0)));
    let out = blrp::attention::attention_block(&mut tape, &bound, &p, x, Some(kv), &BoolMask::all(3, 1)).unwrap();
    let w = tape.attention_weights(out.attention).unwrap();
    assert!(w.data().iter().all(|&v| v == 1.0));
}

#[test]
fn single_latent_row_weights_sum_to_one() {
    let (store, p) = random_block(11, 4, 4, 2, true);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let latent = tape.leaf(to_tensor(&random_m(&mut rng(11), 1, 4, 1.0)));
    let kv = tape.leaf(to_tensor(&random_m(&mut rng(12), 6, 4, 1.0)));
    let mask = BoolMask::keys(1, vec![true, true, false, true, false, true]);
    let out = blrp::attention::attention_block(&mut tape, &bound, &p, latent, Some(kv), &mask).unwrap();
    let w = tape.attention_weights(out.attention).unwrap();
    for row in w.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!((row[2], row[4]), (0.0, 0.0));
    }
}

/// With one segment as the key set, the latent update is the segment update
/// with the roles of query and key inputs swapped.
#[test]
fn cross_l_is_cross_x_with_roles_swapped() {
    let (store, p) = random_block(13, 4, 6, 2, true);
    let mut g = rng(13);
    let latent = random_m(&mut g, 3, 4, 1.0);
    let seg = random_m(&mut g, 5, 4, 1.0);
    let valid = vec![true, true, true, false, false];
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let (vl, vs) = (tape.leaf(to_tensor(&latent)), tape.leaf(to_tensor(&seg)));
    let a = theta_cross_l(&mut tape, &bound, &p, vl, vs, &valid).unwrap();
    let b = theta_cross_x(&mut tape, &bound, &p, vl, vs, &valid).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-9);
}

#[test]
fn output_shape_follows_the_query_side() {
    let (store, p) = random_block(14, 4, 4, 1, true);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.leaf(blrp::Tensor::filled(2, 4, 0.3));
    let kv = tape.leaf(blrp::Tensor::filled(7, 4, 0.1));
    let out = theta_cross_x(&mut tape, &bound, &p, q, kv, &[true; 7]).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 4]);
}
