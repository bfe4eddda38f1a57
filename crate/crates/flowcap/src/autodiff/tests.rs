use super::*;
use crate::autodiff::finite_difference_gradient;
use crate::rng::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // Keep values away from relu's kink so finite differences stay clean.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mut v = rng.range(-2.0, 2.0);
            if v.abs() < 1e-3 {
                v += 0.5;
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `loss = sum(op(params...))`-style graphs and compares tape
/// gradients against central finite differences for every primitive.
#[test]
fn every_primitive_matches_finite_differences() {
    type Builder = fn(&mut Tape, &Binding) -> Var;
    let cases: Vec<(&str, Vec<(&str, Vec<usize>)>, Builder)> = vec![
        ("add", vec![("a", vec![3, 2]), ("b", vec![3, 2])], |t, bind| {
            let y = t.add(bind.var("a"), bind.var("b")).unwrap();
            t.sum(y)
        }),
        ("add_scalar_broadcast", vec![("a", vec![4]), ("b", vec![1])], |t, bind| {
            let y = t.add(bind.var("a"), bind.var("b")).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("sub", vec![("a", vec![5]), ("b", vec![5])], |t, bind| {
            let y = t.sub(bind.var("a"), bind.var("b")).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, bind| {
            let y = t.mul(bind.var("a"), bind.var("b")).unwrap();
            t.sum(y)
        }),
        ("scale", vec![("a", vec![6])], |t, bind| {
            let y = t.scale(bind.var("a"), -1.75);
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |t, bind| {
            let y = t.matmul(bind.var("a"), bind.var("b")).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("matvec", vec![("a", vec![3, 4]), ("b", vec![4])], |t, bind| {
            let y = t.matmul(bind.var("a"), bind.var("b")).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("affine", vec![("w", vec![3, 2]), ("x", vec![2, 5]), ("b", vec![3])], |t, bind| {
            let y = t
                .affine(bind.var("w"), bind.var("x"), bind.var("b"))
                .unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("relu", vec![("a", vec![8])], |t, bind| {
            let y = t.relu(bind.var("a"));
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("tanh", vec![("a", vec![8])], |t, bind| {
            let y = t.tanh(bind.var("a"));
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("cos", vec![("a", vec![8])], |t, bind| {
            let y = t.cos(bind.var("a"));
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("sin", vec![("a", vec![8])], |t, bind| {
            let y = t.sin(bind.var("a"));
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("mse", vec![("a", vec![6]), ("b", vec![6])], |t, bind| {
            t.mse(bind.var("a"), bind.var("b")).unwrap()
        }),
        ("sum", vec![("a", vec![2, 4])], |t, bind| {
            let y = t.mul(bind.var("a"), bind.var("a")).unwrap();
            t.sum(y)
        }),
        ("dot", vec![("a", vec![5]), ("b", vec![5])], |t, bind| {
            t.dot(bind.var("a"), bind.var("b")).unwrap()
        }),
        ("slice_rows", vec![("a", vec![4, 3])], |t, bind| {
            let y = t.slice_rows(bind.var("a"), 1, 2).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
        ("concat_rows", vec![("a", vec![2, 3]), ("b", vec![3, 3])], |t, bind| {
            let y = t.concat_rows(bind.var("a"), bind.var("b")).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        }),
    ];

    for (name, param_shapes, build) in cases {
        let mut rng = Rng::new(0xfeed ^ name.len() as u64);
        for trial in 0..100 {
            let mut store = ParamStore::new();
            for (pname, shape) in &param_shapes {
                store.insert(pname, random_tensor(&mut rng, shape));
            }

            let mut tape = Tape::new();
            let binding = tape.bind(&store);
            let loss = build(&mut tape, &binding);
            let grads = tape.backward(loss).unwrap();
            store.zero_grads();
            store.accumulate(&binding, &grads);
            let analytic = store.flatten_grads();

            let numeric = finite_difference_gradient(
                |s| {
                    let mut t = Tape::new();
                    let b = t.bind(s);
                    let l = build(&mut t, &b);
                    Ok(t.value(l).item())
                },
                &mut store,
                1e-5,
            )
            .unwrap();

            for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(
                    rel_err(a, n) <= 1e-6,
                    "op {name} trial {trial} coord {i}: analytic {a:e} vs numeric {n:e}"
                );
            }
        }
    }
}

#[test]
fn hand_checked_linear_regression_gradient() {
    // loss = mse(w*x, y) with w=1, x=2, y=4 gives dloss/dw = 2(2-4)*2 = -8.
    let mut store = ParamStore::new();
    store.insert("w", Tensor::matrix(&[vec![1.0]]).unwrap());
    let mut tape = Tape::new();
    let binding = tape.bind(&store);
    let x = tape.leaf(Tensor::vector(&[2.0]));
    let y = tape.leaf(Tensor::vector(&[4.0]));
    let pred = tape.matmul(binding.var("w"), x).unwrap();
    let loss = tape.mse(pred, y).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&binding, &grads);
    assert_eq!(store.grad("w").data(), &[-8.0]);
}

#[test]
fn loss_independent_of_parameter_gives_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("unused", Tensor::vector(&[5.0, -1.0]));
    let mut tape = Tape::new();
    let binding = tape.bind(&store);
    let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(&[0.5, 0.5]));
    let loss = tape.mse(a, b).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&binding, &grads);
    assert_eq!(store.grad("unused").data(), &[0.0, 0.0]);
}

#[test]
fn two_layer_tanh_mlp_matches_finite_differences() {
    let mut rng = Rng::new(42);
    let mut store = ParamStore::new();
    store.insert("w1", random_tensor(&mut rng, &[4, 5]));
    store.insert("b1", random_tensor(&mut rng, &[4]));
    store.insert("w2", random_tensor(&mut rng, &[1, 4]));
    store.insert("b2", random_tensor(&mut rng, &[1]));
    let x = Tensor::vector(&[0.3, -0.7, 1.1, 0.2, -0.4]);
    let target = Tensor::vector(&[0.25]);

    let build = |tape: &mut Tape, binding: &Binding| -> Var {
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(target.clone());
        let h = tape
            .affine(binding.var("w1"), xv, binding.var("b1"))
            .unwrap();
        let h = tape.tanh(h);
        let out = tape
            .affine(binding.var("w2"), h, binding.var("b2"))
            .unwrap();
        tape.mse(out, tv).unwrap()
    };

    let mut tape = Tape::new();
    let binding = tape.bind(&store);
    let loss = build(&mut tape, &binding);
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&binding, &grads);
    let analytic = store.flatten_grads();

    let numeric = finite_difference_gradient(
        |s| {
            let mut t = Tape::new();
            let b = t.bind(s);
            let l = build(&mut t, &b);
            Ok(t.value(l).item())
        },
        &mut store,
        1e-5,
    )
    .unwrap();

    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_err(*a, *n) <= 1e-6, "{a:e} vs {n:e}");
    }
}

#[test]
fn accumulation_is_additive() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::matrix(&[vec![1.5]]).unwrap());
    let mut tape = Tape::new();
    let binding = tape.bind(&store);
    let x = tape.leaf(Tensor::vector(&[2.0]));
    let y = tape.leaf(Tensor::vector(&[4.0]));
    let pred = tape.matmul(binding.var("w"), x).unwrap();
    let loss = tape.mse(pred, y).unwrap();
    let grads = tape.backward(loss).unwrap();

    store.accumulate(&binding, &grads);
    let once = store.grad("w").data().to_vec();
    store.accumulate(&binding, &grads);
    let twice = store.grad("w").data().to_vec();
    assert_eq!(twice[0].to_bits(), (2.0 * once[0]).to_bits());
}

#[test]
fn replay_is_bit_deterministic() {
    let run = || -> Vec<u64> {
        let mut rng = Rng::new(99);
        let mut store = ParamStore::new();
        store.insert("w1", random_tensor(&mut rng, &[3, 3]));
        store.insert("b1", random_tensor(&mut rng, &[3]));
        let mut tape = Tape::new();
        let binding = tape.bind(&store);
        let x = tape.leaf(random_tensor(&mut rng, &[3]));
        let h = tape
            .affine(binding.var("w1"), x, binding.var("b1"))
            .unwrap();
        let h = tape.tanh(h);
        let loss = tape.sum(h);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&binding, &grads);
        store.flatten_grads().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(
        tape.backward(a),
        Err(Error::NonScalarLoss(_))
    ));
}
