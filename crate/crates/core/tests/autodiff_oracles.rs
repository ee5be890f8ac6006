use proptest::prelude::*;
use recom_core::autodiff::{Graph, NodeId, Parameter};
use recom_core::Matrix;

const EPS: f64 = 1e-5;

/// Builds the loss from leaf nodes; the oracle evaluates it on plain values.
type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

fn loss_value(inputs: &[Matrix], build: &Build) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|m| g.constant(m.clone())).collect();
    let l = build(&mut g, &leaves);
    g.value(l).as_slice()[0]
}

/// Largest relative error between backprop and central differences over
/// every input entry.
fn fd_max_rel_err(inputs: &[Matrix], build: &Build) -> f64 {
    let params: Vec<Parameter> = inputs
        .iter()
        .enumerate()
        .map(|(k, m)| Parameter::new(format!("x{k}"), m.clone()))
        .collect();
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| g.param(p, true)).collect();
    let l = build(&mut g, &leaves);
    g.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (k, m) in inputs.iter().enumerate() {
        let analytic = g
            .grad(leaves[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for e in 0..m.len() {
            let mut up = inputs.to_vec();
            up[k].as_mut_slice()[e] += EPS;
            let mut down = inputs.to_vec();
            down[k].as_mut_slice()[e] -= EPS;
            let numeric = (loss_value(&up, build) - loss_value(&down, build)) / (2.0 * EPS);
            let a = analytic.as_slice()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// `sum(w .* y)` so that every output entry gets a distinct weight.
fn weighted(g: &mut Graph, y: NodeId, w: &Matrix) -> NodeId {
    let w = g.constant(w.clone());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Away from the leaky-relu kink, where central differences straddle the corner.
fn off_kink(m: &Matrix) -> bool {
    m.as_slice().iter().all(|v| v.abs() > 10.0 * EPS)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients(a in mat(3, 3), b in mat(3, 2), w in mat(3, 2)) {
        let err = fd_max_rel_err(&[a, b], &move |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            weighted(g, y, &w)
        });
        prop_assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn concat_gradients(a in mat(2, 2), b in mat(3, 2), w in mat(5, 2)) {
        let err = fd_max_rel_err(&[a, b], &move |g, x| {
            let y = g.concat(x[0], x[1]).unwrap();
            weighted(g, y, &w)
        });
        prop_assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn unary_gradients(x in mat(4, 2), w in mat(4, 2)) {
        prop_assume!(off_kink(&x));
        type Op = fn(&mut Graph, NodeId) -> NodeId;
        let ops: [Op; 4] = [
            |g, x| g.sigmoid(x),
            |g, x| g.tanh(x),
            |g, x| g.leaky_relu(x),
            |g, x| g.sub_from_one(x),
        ];
        for op in ops {
            let w = w.clone();
            let err = fd_max_rel_err(&[x.clone()], &move |g, v| {
                let y = op(g, v[0]);
                weighted(g, y, &w)
            });
            prop_assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn binary_gradients(a in mat(3, 2), b in mat(3, 2), w in mat(3, 2)) {
        type Op = fn(&mut Graph, NodeId, NodeId) -> NodeId;
        let ops: [Op; 3] = [
            |g, a, b| g.mul(a, b).unwrap(),
            |g, a, b| g.add(a, b).unwrap(),
            |g, a, b| g.sub(a, b).unwrap(),
        ];
        for op in ops {
            let w = w.clone();
            let err = fd_max_rel_err(&[a.clone(), b.clone()], &move |g, x| {
                let y = op(g, x[0], x[1]);
                weighted(g, y, &w)
            });
            prop_assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn softmax_gradients(x in mat(5, 2), w in mat(5, 2)) {
        let err = fd_max_rel_err(&[x], &move |g, v| {
            let y = g.softmax(v[0]).unwrap();
            weighted(g, y, &w)
        });
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn softmax_normalised_at_large_magnitude(v in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let mut g = Graph::new();
        let x = g.constant(Matrix::column(&v));
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bias_mean_scale_gradients(x in mat(3, 4), b in mat(3, 1), w in mat(3, 4)) {
        let err = fd_max_rel_err(&[x, b], &move |g, v| {
            let y = g.add_column(v[0], v[1]).unwrap();
            let y = g.scale(y, -1.5);
            let wn = g.constant(w.clone());
            let p = g.mul(y, wn).unwrap();
            g.mean(p).unwrap()
        });
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn column_routing_gradients(x in mat(2, 4), y in mat(2, 4), w in mat(2, 4)) {
        // columns 0 and 2 from tanh(x), 1 and 3 from sigmoid(y)
        let err = fd_max_rel_err(&[x, y], &move |g, v| {
            let a = g.select_cols(v[0], &[0, 2]).unwrap();
            let a = g.tanh(a);
            let b = g.select_cols(v[1], &[1, 3]).unwrap();
            let b = g.sigmoid(b);
            let out = g.assemble_cols(&[(a, &[0, 2][..]), (b, &[1, 3][..])], 4).unwrap();
            weighted(g, out, &w)
        });
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn two_layer_net_gradients(w1 in mat(4, 3), w2 in mat(2, 4), x in mat(3, 5), t in mat(2, 5)) {
        let err = fd_max_rel_err(&[w1, w2], &move |g, v| {
            let xn = g.constant(x.clone());
            let h = g.matmul(v[0], xn).unwrap();
            let h = g.tanh(h);
            let y = g.matmul(v[1], h).unwrap();
            let tn = g.constant(t.clone());
            let d = g.sub(y, tn).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.mean(sq).unwrap()
        });
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn repeated_backward_is_idempotent(w in mat(2, 3), x in mat(3, 2)) {
        let p = Parameter::new("w", w);
        let mut g = Graph::new();
        let pn = g.param(&p, true);
        let xn = g.constant(x);
        let y = g.matmul(pn, xn).unwrap();
        let y = g.tanh(y);
        let l = g.sum(y);
        g.backward(l).unwrap();
        let first = g.grad(pn).unwrap().clone();
        g.backward(l).unwrap();
        prop_assert_eq!(&first, g.grad(pn).unwrap());
    }
}

#[test]
fn tanh_gradient_at_point_three() {
    let p = Parameter::new("x", Matrix::column(&[0.3]));
    let mut g = Graph::new();
    let x = g.param(&p, true);
    let y = g.tanh(x);
    let l = g.sum(y);
    g.backward(l).unwrap();
    let numeric = (libm::tanh(0.3 + EPS) - libm::tanh(0.3 - EPS)) / (2.0 * EPS);
    let a = g.grad(x).unwrap().as_slice()[0];
    assert!((a - numeric).abs() / numeric.abs() < 1e-6);
}

#[test]
fn detach_and_zero_grads() {
    let mut p = Parameter::new("p", Matrix::column(&[2.0, 3.0]));
    let mut g = Graph::new();
    let x = g.param(&p, true);
    let d = g.detach(x);
    assert_eq!(g.value(d).as_slice(), &[2.0, 3.0]);
    let y = g.mul(d, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    // only the live path contributes: d(sum(c * x))/dx = c
    assert_eq!(g.grad(x).unwrap().as_slice(), &[2.0, 3.0]);
    g.accumulate_grad(x, &mut p);
    assert_eq!(p.grad.as_slice(), &[2.0, 3.0]);
    p.zero_grad();
    assert!(p.grad.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn empty_concat() {
    let mut g = Graph::new();
    let a = g.constant(Matrix::zeros(0, 1));
    let b = g.constant(Matrix::column(&[5.0]));
    let c = g.concat(a, b).unwrap();
    assert_eq!(g.value(c).as_slice(), &[5.0]);
}
