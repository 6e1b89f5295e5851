use dualvdt::attention::*;
use dualvdt::data::{make_windows, synth_sinusoids};
use dualvdt::numeric::{grad_check_params, Graph, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

/// Independent dense attention for one head on `x: [L, d]`.
fn dense_head(x: &[f64], l: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64], dh: usize, allowed: &[bool], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let q = matmul(x, wq, l, d, dh);
    let k = matmul(x, wk, l, d, dh);
    let v = matmul(x, wv, l, d, dh);
    let mut weights = vec![0.0; l * l];
    for a in 0..l {
        let logits: Vec<Option<f64>> = (0..l)
            .map(|b| allowed[a * l + b].then(|| (0..dh).map(|j| q[a * dh + j] * k[b * dh + j]).sum::<f64>() / scale))
            .collect();
        let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().flatten().map(|v| (v - max).exp()).sum();
        for b in 0..l {
            weights[a * l + b] = logits[b].map_or(0.0, |v| (v - max).exp() / z);
        }
    }
    (matmul(&weights, &v, l, l, dh), weights)
}

fn branch(store: &mut ParamStore, d: usize, heads: usize, seed: u64) -> AttentionBranch {
    AttentionBranch::new(store, "b", d, heads, &mut Rng::new(seed)).unwrap()
}

#[test]
fn masks_match_brute_force() {
    for n in 1..=5 {
        for t in 1..=5 {
            let m = build_masks(n, t).unwrap();
            let size = n * t;
            for a in 0..size {
                let (ta, ia) = (a / n, a % n);
                let mut ones = 0;
                for b in 0..size {
                    let (tb, ib) = (b / n, b % n);
                    assert_eq!(ta * n + ia, a);
                    assert_eq!(tb * n + ib, b);
                    let same_var = ia == ib;
                    assert_eq!(m.gamma_at(a, b), same_var);
                    assert_eq!(m.gamma_at(a, b), m.gamma_at(b, a));
                    assert_ne!(m.gamma_at(a, b), m.complement_at(a, b));
                    ones += same_var as usize;
                }
                assert_eq!(ones, t);
            }
        }
    }
}

#[test]
fn three_by_four_rows_hold_four_ones() {
    let m = build_masks(3, 4).unwrap();
    for row in m.gamma.chunks(12) {
        assert_eq!(row.iter().filter(|&&g| g).count(), 4);
    }
}

proptest! {
    #[test]
    fn gamma_is_permutation_equivariant(n in 1usize..5, t in 1usize..5, seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut perm);
        let m = build_masks(n, t).unwrap();
        let pos = |a: usize| (a / n) * n + perm[a % n];
        let size = n * t;
        for a in 0..size {
            for b in 0..size {
                prop_assert_eq!(m.gamma_at(pos(a), pos(b)), m.gamma_at(a, b));
            }
        }
    }
}

#[test]
fn identity_mask_returns_value_projection() {
    let (l, d) = (4, 4);
    let mut store = ParamStore::new();
    let br = branch(&mut store, d, 1, 1);
    let allowed: Vec<bool> = (0..l * l).map(|i| i / l == i % l).collect();
    let x = Rng::new(2).normal_tensor(&[l, d]);
    let g = Graph::inference(&store);
    let xv = g.input(x.clone());
    let (out, _) = masked_attention(&g, xv, &allowed, &br, 2.0).unwrap();
    let v = x.matmul(store.get(br.heads[0].v.weight)).unwrap();
    for (a, b) in g.value(out).data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn equal_rows_attend_uniformly() {
    let (l, d) = (6, 2);
    let mut store = ParamStore::new();
    let br = branch(&mut store, d, 1, 3);
    for p in [br.heads[0].q.weight, br.heads[0].k.weight, br.heads[0].v.weight] {
        *store.get_mut(p) = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    let m = build_masks(2, 3).unwrap();
    let g = Graph::inference(&store);
    let x = g.input(Tensor::full(&[l, d], 0.7));
    let (_, w) = masked_attention(&g, x, &m.gamma, &br, 1.0).unwrap();
    let w = g.value(w[0]);
    for a in 0..l {
        for b in 0..l {
            let expect = if m.gamma_at(a, b) { 1.0 / 3.0 } else { 0.0 };
            assert!((w.data()[a * l + b] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn matches_dense_recomputation() {
    let mut rng = Rng::new(11);
    for trial in 0..20u64 {
        let (l, d, heads) = (3, 2, if trial % 2 == 0 { 1 } else { 2 });
        let mut store = ParamStore::new();
        let br = branch(&mut store, d, heads, trial);
        let x = rng.normal_tensor(&[l, d]);
        let mut allowed: Vec<bool> = (0..l * l).map(|_| rng.uniform() < 0.6).collect();
        for a in 0..l {
            allowed[a * l + a] = true;
        }
        let g = Graph::inference(&store);
        let (out, ws) = masked_attention(&g, g.input(x.clone()), &allowed, &br, 1.3).unwrap();
        let out = g.value(out);
        let dh = br.head_width;
        for (h, head) in br.heads.iter().enumerate() {
            let (o, w) = dense_head(
                x.data(), l, d,
                store.get(head.q.weight).data(),
                store.get(head.k.weight).data(),
                store.get(head.v.weight).data(),
                dh, &allowed, 1.3,
            );
            let got_w = g.value(ws[h]);
            for (a, b) in got_w.data().iter().zip(&w) {
                assert!((a - b).abs() < 1e-12);
            }
            for r in 0..l {
                for j in 0..dh {
                    assert!((out.data()[r * d + h * dh + j] - o[r * dh + j]).abs() < 1e-12);
                }
            }
            for (row, mask) in got_w.data().chunks(l).zip(allowed.chunks(l)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for (v, ok) in row.iter().zip(mask) {
                    if !ok {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn fully_masked_row_rejected() {
    let mut store = ParamStore::new();
    let br = branch(&mut store, 2, 1, 0);
    let g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[2, 2]));
    let allowed = [true, true, false, false];
    assert!(masked_attention(&g, x, &allowed, &br, 1.0).is_err());
}

#[test]
fn zero_complement_values_leave_gamma_branch() {
    let (n, t, d) = (3, 4, 8);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "blk", d, 2, n, ScaleMode::SqrtHeadWidth, &mut Rng::new(5)).unwrap();
    let masks = build_masks(n, t).unwrap();
    let x = Rng::new(6).normal_tensor(&[2, n * t, d]);
    let full = {
        let g = Graph::inference(&store);
        let (a, _) = local_temporal_block(&g, g.input(x.clone()), &p, &masks).unwrap();
        g.value(a)
    };
    for h in &p.complement.as_ref().unwrap().heads {
        let w = store.get_mut(h.v.weight);
        *w = Tensor::zeros(w.shape());
    }
    let g = Graph::inference(&store);
    let xv = g.input(x.clone());
    let (a, edges) = local_temporal_block(&g, xv, &p, &masks).unwrap();
    let (gamma_only, _) = masked_attention(&g, xv, &masks.gamma, &p.gamma, p.scale()).unwrap();
    assert_eq!(g.value(a), g.value(gamma_only));
    assert_ne!(g.value(a), full);
    for (ws, support) in [(&edges.e_l, &masks.gamma), (&edges.e_t, &masks.complement)] {
        assert_eq!(ws.len(), 2);
        for w in ws {
            for (row, sup) in w.data().chunks(n * t).zip(support.chunks(n * t).cycle()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row.iter().zip(sup).all(|(v, &s)| s || *v == 0.0));
            }
        }
    }
}

#[test]
fn univariate_block_uses_gamma_only() {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "blk", 4, 2, 1, ScaleMode::VarCount, &mut Rng::new(1)).unwrap();
    assert!(p.complement.is_none());
    let masks = build_masks(1, 5).unwrap();
    let g = Graph::inference(&store);
    let x = g.input(Rng::new(2).normal_tensor(&[5, 4]));
    let (a, edges) = local_temporal_block(&g, x, &p, &masks).unwrap();
    let (gamma, _) = masked_attention(&g, x, &masks.gamma, &p.gamma, 1.0).unwrap();
    assert_eq!(g.value(a), g.value(gamma));
    assert!(edges.e_t.is_empty());
}

#[test]
fn block_gradient_wrt_gamma_weights() {
    let (n, t, d) = (2, 3, 4);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "blk", d, 2, n, ScaleMode::SqrtHeadWidth, &mut Rng::new(8)).unwrap();
    let masks = build_masks(n, t).unwrap();
    let x = Rng::new(9).normal_tensor(&[n * t, d]);
    let ids = store.ids_with_prefix("blk.gamma");
    let err = grad_check_params(
        &store,
        &ids,
        |g| {
            let (a, _) = local_temporal_block(g, g.input(x.clone()), &p, &masks)?;
            let w = g.input(Rng::new(10).normal_tensor(&[n * t, d]));
            g.sum(g.mul(a, w)?)
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

fn window() -> dualvdt::data::SeriesWindow {
    let s = synth_sinusoids(&mut Rng::new(4), 4, 64, 0.1);
    make_windows(&s, 24, 8, 8).remove(0)
}

#[test]
fn encoders_share_output_shapes() {
    let w = window();
    for kind in EncoderKind::ALL {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { kind, width: 16, heads: 2, blocks: 2, ..Default::default() };
        let enc = Encoder::new(&mut store, "enc", &cfg, 4, 24, 8, &mut Rng::new(1)).unwrap();
        let a = enc.encode(&store, &w).unwrap();
        let b = enc.encode(&store, &w).unwrap();
        assert_eq!(a.mu.shape(), &[8]);
        assert_eq!(a.sigma.shape(), &[8]);
        assert!(a.sigma.data().iter().all(|&s| s > 0.0));
        assert_eq!(a, b);
    }
}

#[test]
fn encoder_rejects_wrong_window() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", &EncoderConfig::default(), 3, 24, 8, &mut Rng::new(1)).unwrap();
    assert!(enc.encode(&store, &window()).is_err());
}

#[test]
fn edge_csv_lists_support() {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { width: 8, heads: 2, blocks: 1, ..Default::default() };
    let enc = Encoder::new(&mut store, "enc", &cfg, 2, 3, 2, &mut Rng::new(1)).unwrap();
    let g = Graph::inference(&store);
    let x = g.input(Rng::new(3).normal_tensor(&[1, 3, 2]));
    let (_, _, edges) = enc.forward_with_edges(&g, x).unwrap();
    let mut buf = Vec::new();
    edges[0].write_csv(&mut buf, Branch::Gamma, 0).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("head,from,to,weight"));
    // 2 heads × 6 positions × 3 same-variable partners
    assert_eq!(lines.count(), 36);
}

proptest! {
    #[test]
    fn masks_partition_positions(n in 1usize..12, t in 1usize..12) {
        let m = build_masks(n, t).unwrap();
        let size = n * t;
        for a in 0..size {
            prop_assert_eq!((0..size).filter(|&b| m.gamma_at(a, b)).count(), t);
            for b in 0..size {
                prop_assert!(m.gamma_at(a, b) ^ m.complement_at(a, b));
                prop_assert_eq!(m.gamma_at(a, b), m.gamma_at(b, a));
            }
        }
    }
}
