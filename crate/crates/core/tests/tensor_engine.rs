use mvclip_core::autograd::{Graph, Var};
use mvclip_core::gradcheck::{grad_check, grad_check_inputs, Coordinates};
use mvclip_core::tensor::Tensor;
use mvclip_core::TensorError;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weighted_sum(g: &mut Graph<f64>, out: Var) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.9 * i as f64 + 0.3).cos() + 0.2).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let y = g.mul(out, w)?;
    g.sum(y)
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), data[..n].to_vec()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn check_unary(
    shape: &[usize],
    data: &[f64],
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
) -> f64 {
    let x = tensor(shape, data);
    grad_check(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y)
        },
        &x,
        STEP,
    )
    .unwrap()
    .max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn unary_ops_pass_gradcheck(r in 1usize..4, c in 1usize..5, data in values(16)) {
        let s = [r, c];
        prop_assert!(check_unary(&s, &data, |g, x| g.scale(x, -1.7)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.transpose(x)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.softmax(x, 1)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.softmax(x, 0)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.gelu(x)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.map(x, |v| v * v * v, |v| 3.0 * v * v)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.reshape(x, &[r * c])) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.sum_axis(x, 0)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.sum_axis(x, 1)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.mean_axis(x, 1)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.slice(x, 1, c / 2, c - c / 2)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.l2_normalize(x, 1e-12)) < TOL);
        prop_assert!(check_unary(&s, &data, |g, x| g.gather_rows(x, &[r - 1, 0, r - 1])) < TOL);
        prop_assert!(check_unary(&[c, c], &data, |g, x| g.causal_softmax(x)) < TOL);
        let labels = vec![c - 1; r];
        prop_assert!(check_unary(&s, &data, |g, x| g.cross_entropy(x, &labels)) < TOL);
    }

    #[test]
    fn binary_ops_pass_gradcheck(
        r in 1usize..4,
        k in 1usize..4,
        c in 2usize..5,
        a in values(16),
        b in values(16),
    ) {
        let run = |inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>| {
            grad_check_inputs(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y)
                },
                &inputs,
                STEP,
                Coordinates::All,
            )
            .unwrap()
            .max_rel_error
        };
        let ab = || vec![tensor(&[r, c], &a), tensor(&[r, c], &b)];
        prop_assert!(run(ab(), &|g, v| g.add(v[0], v[1])) < TOL);
        prop_assert!(run(ab(), &|g, v| g.sub(v[0], v[1])) < TOL);
        prop_assert!(run(ab(), &|g, v| g.mul(v[0], v[1])) < TOL);
        prop_assert!(run(ab(), &|g, v| g.concat(&[v[0], v[1]], 0)) < TOL);
        prop_assert!(run(ab(), &|g, v| g.concat(&[v[0], v[1]], 1)) < TOL);
        prop_assert!(run(vec![tensor(&[r, c], &a), tensor(&[c], &b)], &|g, v| g.add_row(v[0], v[1])) < TOL);
        prop_assert!(run(vec![tensor(&[r, k], &a), tensor(&[k, c], &b)], &|g, v| g.matmul(v[0], v[1])) < TOL);
        let ln = vec![tensor(&[r, c], &a), tensor(&[c], &b), tensor(&[c], &a[5..])];
        prop_assert!(run(ln, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
    }

    #[test]
    fn patchify_passes_gradcheck(p in 1usize..3, n in 1usize..3, ch in 1usize..3, data in values(36 * 2)) {
        let s = p * n;
        prop_assert!(check_unary(&[s, s, ch], &data, |g, x| g.patchify(x, p)) < TOL);
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..6, c in 1usize..12, data in prop::collection::vec(-1e3f64..1e3, 72)) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(&[r, c], &data), false);
        let y = g.softmax(x, 1).unwrap();
        for i in 0..r {
            let s: f64 = g.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
        }
        let mut g = Graph::<f32>::new();
        let x = g.leaf(tensor(&[r, c], &data).cast(), false);
        let y = g.softmax(x, 1).unwrap();
        for i in 0..r {
            let s: f32 = g.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "f32 row {i} sums to {s}");
        }
    }

    #[test]
    fn concat_slice_round_trip(
        r in 1usize..5,
        widths in prop::collection::vec(1usize..5, 1..4),
        axis in 0usize..2,
        data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 60),
    ) {
        let mut g = Graph::<f32>::new();
        let mut offset = 0;
        let parts: Vec<Var> = widths
            .iter()
            .map(|&w| {
                let shape = if axis == 0 { [w, r] } else { [r, w] };
                let t = Tensor::new(shape.to_vec(), data[offset..offset + w * r].to_vec()).unwrap();
                offset += w * r;
                g.leaf(t, false)
            })
            .collect();
        let joined = g.concat(&parts, axis).unwrap();
        let mut start = 0;
        for (&part, &w) in parts.iter().zip(&widths) {
            let back = g.slice(joined, axis, start, w).unwrap();
            start += w;
            let (a, b) = (g.value(back).data(), g.value(part).data());
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn leaf_used_twice_gets_the_sum_of_both_paths(r in 1usize..4, c in 1usize..4, a in values(16), w in values(16)) {
        // y = sum(W * x * x + x), against the same graph built from two copies of x
        let x0 = tensor(&[r, c], &a);
        let wt = tensor(&[r, c], &w);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone(), true);
        let wv = g.constant(wt.clone());
        let xx = g.mul(x, x).unwrap();
        let t = g.mul(wv, xx).unwrap();
        let t = g.add(t, x).unwrap();
        let y = g.sum(t).unwrap();
        let shared = g.backward(y).unwrap().get(x).unwrap();

        let mut g = Graph::<f64>::new();
        let x1 = g.leaf(x0.clone(), true);
        let x2 = g.leaf(x0.clone(), true);
        let x3 = g.leaf(x0, true);
        let wv = g.constant(wt);
        let xx = g.mul(x1, x2).unwrap();
        let t = g.mul(wv, xx).unwrap();
        let t = g.add(t, x3).unwrap();
        let y = g.sum(t).unwrap();
        let grads = g.backward(y).unwrap();
        let (g1, g2, g3) = (grads.get(x1).unwrap(), grads.get(x2).unwrap(), grads.get(x3).unwrap());
        for i in 0..r * c {
            let split = g1.data()[i] + g2.data()[i] + g3.data()[i];
            prop_assert!((shared.data()[i] - split).abs() <= 1e-12);
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::zeros([2, 3]).unwrap(), false);
    let b = g.leaf(Tensor::zeros([2, 3]).unwrap(), false);
    assert!(g.matmul(a, b).is_err());
    assert!(g.slice(a, 1, 2, 2).is_err());
    assert!(g.softmax(a, 2).is_err());
    assert!(g.causal_softmax(a).is_err());
}

#[test]
fn tensor_rejects_mismatched_data() {
    assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
}
