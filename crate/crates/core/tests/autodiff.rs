use eivit::autodiff::{grad_check, random_projection, uniform, GradCheckOptions, Graph, Var};
use eivit::{Result, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions::default();
    let wrapped = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let y = f(g, v)?;
        random_projection(g, y, 11)
    };
    grad_check(wrapped, inputs, &opts).unwrap().max_rel_error
}

fn eval(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let y = f(&mut g, &vars).unwrap();
    g.value(y).clone()
}

#[test]
fn matmul_examples_and_gradient() {
    let m = uniform(&[2, 3], 1);
    let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(eval(&[id, m.clone()], |g, v| g.matmul(v[0], v[1])), m);
    let y = eval(&[t(&[1, 2], &[1.0, 2.0]), t(&[2, 1], &[3.0, 4.0])], |g, v| g.matmul(v[0], v[1]));
    assert_eq!(y.data(), &[11.0]);
    let err = check(&[uniform(&[5, 4], 2), uniform(&[4, 3], 3)], |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn conv2d_examples_and_gradient() {
    let x = uniform(&[1, 3, 4, 4], 4);
    let id = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(eval(&[x.clone(), id], |g, v| g.conv2d(v[0], v[1], None, 1, 0)), x);

    let v = 0.7;
    let y = eval(
        &[Tensor::full(&[1, 1, 5, 5], v), Tensor::full(&[1, 1, 3, 3], 1.0)],
        |g, v| g.conv2d(v[0], v[1], None, 1, 1),
    );
    assert!((y.get(&[0, 0, 2, 2]) - 9.0 * v).abs() < 1e-12);
    assert!((y.get(&[0, 0, 0, 0]) - 4.0 * v).abs() < 1e-12);

    let err = check(
        &[uniform(&[2, 4, 6, 6], 5), uniform(&[3, 4, 3, 3], 6), uniform(&[3], 7)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    assert!(err < 1e-5, "conv2d rel err {err}");
}

#[test]
fn conv2d_rejects_non_integral_extent() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, 2, 0).is_err());
}

#[test]
fn depthwise_examples_and_gradient() {
    let x = uniform(&[1, 2, 5, 5], 8);
    let delta = Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    assert_eq!(eval(&[x.clone(), delta], |g, v| g.depthwise_conv2d(v[0], v[1], None)), x);

    let w = uniform(&[2, 1, 3, 3], 9);
    let y = eval(&[x.clone(), w.clone()], |g, v| g.depthwise_conv2d(v[0], v[1], None));
    let mut x0 = x.clone();
    x0.data_mut()[..25].fill(0.0);
    let y0 = eval(&[x0, w], |g, v| g.depthwise_conv2d(v[0], v[1], None));
    assert_eq!(&y.data()[25..], &y0.data()[25..]);

    let err = check(
        &[uniform(&[2, 3, 5, 5], 10), uniform(&[3, 1, 3, 3], 11), uniform(&[3], 12)],
        |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2])),
    );
    assert!(err < 1e-5, "depthwise rel err {err}");
}

#[test]
fn maxpool_examples() {
    let y = eval(&[t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])], |g, v| g.maxpool2d(v[0]));
    assert_eq!(y.data(), &[4.0]);
    let y = eval(&[Tensor::full(&[1, 2, 4, 6], 3.0)], |g, v| g.maxpool2d(v[0]));
    assert_eq!(y.shape(), &[1, 2, 2, 3]);
    assert!(y.data().iter().all(|&v| v == 3.0));
    let y = eval(&[uniform(&[1, 1, 5, 5], 13)], |g, v| g.maxpool2d(v[0]));
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
}

#[test]
fn maxpool_routes_gradient_to_argmax_only() {
    let x = uniform(&[2, 3, 5, 7], 14);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = g.maxpool2d(xv).unwrap();
    let upstream = uniform(g.shape(y), 15);
    let u = g.constant(upstream.clone());
    let p = g.mul(y, u).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad_tensor(xv);
    let routed: f64 = grad.data().iter().sum();
    let incoming: f64 = upstream.data().iter().sum();
    assert!((routed - incoming).abs() < 1e-12);
    let pooled = g.value(y).clone();
    for n in 0..2 {
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..7 {
                    if grad.get(&[n, c, i, j]) != 0.0 {
                        assert_eq!(x.get(&[n, c, i, j]), pooled.get(&[n, c, i / 2, j / 2]));
                    }
                }
            }
        }
    }
}

#[test]
fn maxpool_tie_goes_to_first_occurrence() {
    let mut g = Graph::new();
    let xv = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.maxpool2d(xv).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad_tensor(xv).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn avgpool_examples_and_gradient() {
    let y = eval(&[t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0])], |g, v| g.avgpool_spatial(v[0]));
    assert_eq!(y.data(), &[3.0]);
    let y = eval(&[Tensor::full(&[1, 3, 3, 5], -1.5)], |g, v| g.avgpool_spatial(v[0]));
    assert!(y.data().iter().all(|&v| (v + 1.5).abs() < 1e-15));

    let mut g = Graph::new();
    let xv = g.param(uniform(&[1, 2, 3, 4], 16));
    let y = g.avgpool_spatial(xv).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad_tensor(xv).data().iter().all(|&d| (d - 1.0 / 12.0).abs() < 1e-15));
}

#[test]
fn linear_examples_and_gradient() {
    let x = uniform(&[4, 3], 17);
    let id = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(eval(&[x.clone(), id], |g, v| g.linear(v[0], v[1], None)), x);
    let beta = t(&[2], &[0.25, -4.0]);
    let y = eval(&[x, Tensor::zeros(&[3, 2]), beta], |g, v| g.linear(v[0], v[1], Some(v[2])));
    for r in 0..4 {
        assert_eq!(&y.data()[2 * r..2 * r + 2], &[0.25, -4.0]);
    }
    let err = check(
        &[uniform(&[2, 5, 4], 18), uniform(&[4, 3], 19), uniform(&[3], 20)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    assert!(err < 1e-6, "linear rel err {err}");
}

#[test]
fn softmax_examples_range_and_gradient() {
    let y = eval(&[t(&[2], &[0.0, 0.0])], |g, v| g.softmax(v[0], 0));
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = eval(&[t(&[2], &[1000.0, 1000.0])], |g, v| g.softmax(v[0], 0));
    assert_eq!(y.data(), &[0.5, 0.5]);

    let x = uniform(&[3, 4, 5], 21).map(|v| 8.0 * v);
    for axis in 0..3 {
        let y = eval(std::slice::from_ref(&x), |g, v| g.softmax(v[0], axis));
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let s = y.shape().to_vec();
        let stride: usize = s[axis + 1..].iter().product();
        for base in 0..y.numel() {
            if !(base / stride).is_multiple_of(s[axis]) {
                continue;
            }
            let sum: f64 = (0..s[axis]).map(|k| y.data()[base + k * stride]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let err = check(&[uniform(&[3, 4, 5], 22 + axis as u64)], |g, v| g.softmax(v[0], axis));
        assert!(err < 1e-5, "softmax axis {axis} rel err {err}");
    }
}

#[test]
fn activation_examples() {
    let y = eval(&[t(&[2], &[-1.0, 2.0])], |g, v| g.relu(v[0]));
    assert_eq!(y.data(), &[0.0, 2.0]);
    let y = eval(&[t(&[1], &[0.0])], |g, v| g.gelu(v[0]));
    assert_eq!(y.data(), &[0.0]);
}

#[test]
fn layernorm_is_standardized_before_affine() {
    let x = uniform(&[2, 6, 3, 3], 25).map(|v| 3.0 * v + 1.0);
    let y = eval(&[x, Tensor::full(&[6], 1.0), Tensor::zeros(&[6])], |g, v| {
        g.layernorm(v[0], v[1], v[2], 1)
    });
    for n in 0..2 {
        for s in 0..9 {
            let col: Vec<f64> = (0..6).map(|c| y.data()[(n * 6 + c) * 9 + s]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn elementwise_and_norm_gradients() {
    let a = uniform(&[3, 4], 26);
    let b = uniform(&[3, 4], 27);
    type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
    let binary: [(&str, Op); 3] = [
        ("add", |g, v| g.add(v[0], v[1])),
        ("sub", |g, v| g.sub(v[0], v[1])),
        ("mul", |g, v| g.mul(v[0], v[1])),
    ];
    for (name, f) in binary {
        let err = check(&[a.clone(), b.clone()], f);
        assert!(err < 1e-4, "{name} rel err {err}");
    }
    let unary: [(&str, Op); 4] = [
        ("gelu", |g, v| g.gelu(v[0])),
        ("sigmoid", |g, v| g.sigmoid(v[0])),
        ("scale", |g, v| g.scale(v[0], -2.5)),
        ("permute", |g, v| g.permute(v[0], &[1, 0])),
    ];
    for (name, f) in unary {
        let err = check(std::slice::from_ref(&a), f);
        assert!(err < 1e-4, "{name} rel err {err}");
    }
    let err = check(
        &[uniform(&[2, 5, 3], 28), uniform(&[5], 29), uniform(&[5], 30)],
        |g, v| g.layernorm(v[0], v[1], v[2], 1),
    );
    assert!(err < 1e-4, "layernorm rel err {err}");
}

#[test]
fn upsample_examples() {
    let y = eval(&[t(&[1, 1, 1, 2], &[1.0, 2.0])], |g, v| g.upsample_nearest2x(v[0], None));
    assert_eq!(y.shape(), &[1, 1, 2, 4]);
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);

    let y = eval(&[Tensor::full(&[1, 2, 5, 5], 2.5)], |g, v| {
        let p = g.maxpool2d(v[0])?;
        g.upsample_nearest2x(p, Some((5, 5)))
    });
    assert_eq!(y.shape(), &[1, 2, 5, 5]);
    assert!(y.data().iter().all(|&v| v == 2.5));

    let map = eivit::autodiff::nearest_index_map(3, 5);
    assert_eq!(map.len(), 5);
    for s in 0..3 {
        assert!(map.contains(&s));
    }
}

#[test]
fn backward_twice_without_reset_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(uniform(&[3], 31));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
    g.reset_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad_tensor(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn forward_backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(uniform(&[2, 3, 6, 6], 32));
        let w = g.param(uniform(&[4, 3, 3, 3], 33));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let loss = random_projection(&mut g, y, 3).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).clone(), g.grad_tensor(x), g.grad_tensor(w))
    };
    assert_eq!(run(), run());
}
