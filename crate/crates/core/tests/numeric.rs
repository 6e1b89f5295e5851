use dualvdt::numeric::{grad_check, Graph, Rng, Tensor, Var};
use dualvdt::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// `Σ w ⊙ y` with fixed random weights, so that no output direction cancels.
fn wsum(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed ^ 0x5eed).normal_tensor(g.shape(y).as_slice());
    g.sum(g.mul(y, g.input(w))?)
}

fn check(point: &Tensor, seed: u64, f: impl Fn(&Graph, Var) -> Result<Var>) -> f64 {
    grad_check(|g, x| wsum(g, f(g, x)?, seed), point, STEP).unwrap()
}

fn positive(t: &Tensor) -> Tensor {
    t.map(|v| v.abs() + 0.5)
}

fn shape3() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_pass_grad_check((b, m, k, seed) in shape3()) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[b, m, k]);
        let other = rng.normal_tensor(&[b, m, k]);
        let row = rng.normal_tensor(&[k]);
        let pos = positive(&other);
        let unary: [(&str, Box<dyn Fn(&Graph, Var) -> Result<Var>>); 12] = [
            ("exp", Box::new(|g: &Graph, x| g.exp(x))),
            ("log", Box::new(|g: &Graph, x| g.log(g.add_scalar(g.square(x)?, 0.5)?))),
            ("sqrt", Box::new(|g: &Graph, x| g.sqrt(g.add_scalar(g.square(x)?, 0.5)?))),
            ("square", Box::new(|g: &Graph, x| g.square(x))),
            ("softplus", Box::new(|g: &Graph, x| g.softplus(x))),
            ("tanh", Box::new(|g: &Graph, x| g.tanh(x))),
            ("silu", Box::new(|g: &Graph, x| g.silu(x))),
            ("neg", Box::new(|g: &Graph, x| g.neg(x))),
            ("add_scalar", Box::new(|g: &Graph, x| g.add_scalar(x, 1.7))),
            ("mul_scalar", Box::new(|g: &Graph, x| g.mul_scalar(x, -0.3))),
            ("layer_norm", Box::new(|g: &Graph, x| g.layer_norm(x, 1e-5))),
            ("reshape", Box::new(move |g: &Graph, x| g.reshape(x, &[b * m, k]))),
        ];
        for (name, f) in &unary {
            let err = check(&x, seed, f);
            prop_assert!(err <= TOL, "{name}: {err}");
        }
        let binary: [(&str, Box<dyn Fn(&Graph, Var, Var) -> Result<Var>>); 4] = [
            ("add", Box::new(|g: &Graph, a, b| g.add(a, b))),
            ("sub", Box::new(|g: &Graph, a, b| g.sub(a, b))),
            ("mul", Box::new(|g: &Graph, a, b| g.mul(a, b))),
            ("div", Box::new(|g: &Graph, a, b| g.div(a, b))),
        ];
        for (name, f) in &binary {
            let err = check(&x, seed, |g, v| f(g, v, g.input(pos.clone())));
            prop_assert!(err <= TOL, "{name} lhs: {err}");
            let err = check(&pos, seed, |g, v| f(g, g.input(x.clone()), v));
            prop_assert!(err <= TOL, "{name} rhs: {err}");
            // Broadcast of a trailing row.
            let err = check(&row.map(|v| v.abs() + 0.5), seed, |g, v| f(g, g.input(x.clone()), v));
            prop_assert!(err <= TOL, "{name} broadcast: {err}");
        }
    }

    #[test]
    fn matrix_ops_pass_grad_check((b, m, k, seed) in shape3(), n in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let a = rng.normal_tensor(&[b, m, k]);
        let shared = rng.normal_tensor(&[k, n]);
        let batched = rng.normal_tensor(&[b, k, n]);
        let bt = rng.normal_tensor(&[b, n, k]);
        let errs = [
            ("matmul a", check(&a, seed, |g, v| g.matmul(v, g.input(shared.clone())))),
            ("matmul shared b", check(&shared, seed, |g, v| g.matmul(g.input(a.clone()), v))),
            ("matmul batched b", check(&batched, seed, |g, v| g.matmul(g.input(a.clone()), v))),
            ("matmul_nt a", check(&a, seed, |g, v| g.matmul_nt(v, g.input(bt.clone())))),
            ("matmul_nt b", check(&bt, seed, |g, v| g.matmul_nt(g.input(a.clone()), v))),
            ("transpose", check(&a, seed, |g, v| g.transpose(v))),
        ];
        for (name, err) in errs {
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn reductions_and_joins_pass_grad_check((b, m, k, seed) in shape3()) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[b, m, k]);
        let y = rng.normal_tensor(&[b, m, 2]);
        for axis in 0..3 {
            let err = check(&x, seed, |g, v| g.sum_axis(v, axis));
            prop_assert!(err <= TOL, "sum_axis {axis}: {err}");
            let err = check(&x, seed, |g, v| g.mean_axis(v, axis));
            prop_assert!(err <= TOL, "mean_axis {axis}: {err}");
        }
        let err = check(&x, seed, |g, v| g.sum(v));
        prop_assert!(err <= TOL, "sum: {err}");
        let err = check(&x, seed, |g, v| g.mean(v));
        prop_assert!(err <= TOL, "mean: {err}");
        let err = check(&x, seed, |g, v| g.concat(&[v, g.input(y.clone()), v], 2));
        prop_assert!(err <= TOL, "concat: {err}");
    }

    #[test]
    fn softmax_family_passes_grad_check_and_normalizes((b, m, k, seed) in shape3(), c in 0.1f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[b, m, k]);
        let mut mask: Vec<bool> = (0..m * k).map(|_| rng.uniform() < 0.4).collect();
        for r in 0..m {
            mask[r * k + rng.index(k)] = false;
        }
        let err = check(&x, seed, |g, v| g.softmax(v));
        prop_assert!(err <= TOL, "softmax: {err}");
        let err = check(&x, seed, |g, v| g.masked_softmax(v, c, Some((&mask, &[m, k]))));
        prop_assert!(err <= TOL, "masked_softmax: {err}");
        let err = check(&x, seed, |g, v| g.softmax(g.masked_fill(v, &mask, &[m, k])?));
        prop_assert!(err <= TOL, "masked_fill + softmax: {err}");

        let g = Graph::new();
        let p = g.value(g.masked_softmax(g.input(x.clone()), c, Some((&mask, &[m, k]))).unwrap());
        let q = g.value(g.softmax(g.masked_fill(g.input(x.clone()), &mask, &[m, k]).unwrap()).unwrap());
        for (r, (row, qrow)) in p.data().chunks(k).zip(q.data().chunks(k)).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((qrow.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, (&v, &w)) in row.iter().zip(qrow).enumerate() {
                prop_assert!(v >= 0.0 && w >= 0.0);
                if mask[(r % m) * k + j] {
                    prop_assert_eq!(v, 0.0);
                    prop_assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn conv1d_passes_grad_check((b, l, cin, seed) in shape3(), cout in 1usize..=4, half in 0usize..=2) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[b, l, cin]);
        let w = rng.normal_tensor(&[2 * half + 1, cin, cout]);
        let err = check(&x, seed, |g, v| g.conv1d(v, g.input(w.clone())));
        prop_assert!(err <= TOL, "conv1d x: {err}");
        let err = check(&w, seed, |g, v| g.conv1d(g.input(x.clone()), v));
        prop_assert!(err <= TOL, "conv1d w: {err}");
    }

    #[test]
    fn same_seed_same_draws(seed in any::<u64>(), stream in 0u64..1000) {
        let a = Rng::with_stream(seed, stream).normal_tensor(&[5, 3]);
        let b = Rng::with_stream(seed, stream).normal_tensor(&[5, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        let c = Rng::with_stream(seed, stream + 1).normal_tensor(&[5, 3]);
        prop_assert_ne!(bits(&a), bits(&c));
    }
}
