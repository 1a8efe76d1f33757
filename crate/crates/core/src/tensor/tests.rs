use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Random linear functional of `y`, turning any op into a scalar test function.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = random(&shape, seed);
    let wv = t.leaf(&w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn check(name: &str, blocks: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let named: Vec<(String, Tensor)> = blocks
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{name}[{i}]"), t))
        .collect();
    let rep = gradcheck(f, &named, 1e-5, 1e-6, None).unwrap();
    assert!(rep.passed(), "{name}: {:?}", rep.blocks);
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let s = t.softmax(x).unwrap();
    assert_eq!(t.value(s), &[0.5, 0.5]);
    let x = t.constant(&[2], vec![1000.0, 1000.0]).unwrap();
    let s = t.softmax(x).unwrap();
    assert_eq!(t.value(s), &[0.5, 0.5]);

    let x = t.constant(&[1, 2], vec![1.0, -1.0]).unwrap();
    let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
    let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!((t.value(y)[0] - 0.99999).abs() < 1e-5);
    assert!((t.value(y)[1] + 0.99999).abs() < 1e-5);

    let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("invalid argument"), "{err}");
    let c = t.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(t.add(a, c).is_err());
    assert!(t.constant(&[2], vec![0.0]).is_err());
}

#[test]
fn sum_of_squares_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut param = Tensor::zeros(&[3]).with_grad();
    param.pull_grad(&t, x);
    assert_eq!(param.grad().unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn accumulation_over_reuse() {
    // f(x) = x·x + x → df/dx_i = 2 x_i + 1
    let xs = [0.5, -1.5, 2.0];
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(&[3], xs.to_vec()).unwrap().with_grad());
    let sq = t.mul(x, x).unwrap();
    let s = t.add(sq, x).unwrap();
    let loss = t.sum(s);
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    for (gi, xi) in g.iter().zip(xs) {
        assert_eq!(*gi, 2.0 * xi + 1.0);
    }
}

#[test]
fn constants_have_no_grad() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    let c = t.constant(&[2], vec![3.0, 4.0]).unwrap();
    let p = t.mul(x, c).unwrap();
    let loss = t.sum(p);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn backward_contract() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    let loss = t.sum(x);
    t.backward(loss).unwrap();
    assert!(matches!(t.backward(loss), Err(Error::State(_))));
}

#[test]
fn softmax_cross_terms_match_finite_differences() {
    let x = random(&[3, 4], 11);
    check("softmax", vec![x], |t, v| {
        let s = t.softmax(v[0])?;
        let sq = t.mul(s, s)?;
        project(t, sq, 12)
    });
}

#[test]
fn primitive_gradients() {
    check("matmul", vec![random(&[3, 4], 1), random(&[4, 5], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 3)
    });
    for trans in [false, true] {
        let b = if trans {
            random(&[2, 5, 4], 5)
        } else {
            random(&[2, 4, 5], 5)
        };
        check("bmm", vec![random(&[2, 3, 4], 4), b], move |t, v| {
            let y = t.bmm(v[0], v[1], trans)?;
            project(t, y, 6)
        });
    }
    check("add", vec![random(&[2, 3], 7), random(&[2, 3], 8)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 9)
    });
    check("add_bias", vec![random(&[4, 3], 10), random(&[3], 11)], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, 12)
    });
    check("scale", vec![random(&[5], 13)], |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 14)
    });
    check("log_softmax", vec![random(&[3, 5], 15)], |t, v| {
        let y = t.log_softmax(v[0])?;
        project(t, y, 16)
    });
    check(
        "layer_norm",
        vec![random(&[3, 6], 17), random(&[6], 18), random(&[6], 19)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 20)
        },
    );
    check("relu", vec![random(&[4, 4], 21)], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 22)
    });
    check("embedding", vec![random(&[3, 4], 23)], |t, v| {
        let y = t.embedding(v[0], &[2, 0, 2, 1])?;
        project(t, y, 24)
    });
    check("dropout", vec![random(&[3, 4], 25)], |t, v| {
        let y = t.dropout(v[0], 0.3, true, 99)?;
        project(t, y, 26)
    });
    check("concat", vec![random(&[2, 3], 27), random(&[1, 3], 28)], |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y, 29)
    });
    check("mask_fill", vec![random(&[2, 2, 2], 30)], |t, v| {
        let mask = Rc::new(vec![false, true, false, false]);
        let y = t.mask_fill(v[0], mask, -3.0)?;
        project(t, y, 31)
    });
    check("heads", vec![random(&[6, 4], 32)], |t, v| {
        let s = t.split_heads(v[0], 2, 3, 2)?;
        let sq = t.mul(s, s)?;
        let m = t.merge_heads(sq, 2, 3, 2)?;
        project(t, m, 33)
    });
    check("select", vec![random(&[3, 2], 34)], |t, v| {
        let y = t.select(v[0], &[1, 0, 1])?;
        project(t, y, 35)
    });
    check("reshape", vec![random(&[2, 3], 36)], |t, v| {
        let y = t.reshape(v[0], &[3, 2])?;
        project(t, y, 37)
    });
}

#[test]
fn heads_round_trip() {
    let mut t = Tape::new();
    let x = t.leaf(&random(&[6, 8], 3));
    let s = t.split_heads(x, 2, 3, 4).unwrap();
    assert_eq!(t.shape(s), &[8, 3, 2]);
    let m = t.merge_heads(s, 2, 3, 4).unwrap();
    assert_eq!(t.value(m), t.value(x));
}

#[test]
fn dropout_contract() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::filled(&[1000], 1.0));
    let eval = t.dropout(x, 0.1, false, 1).unwrap();
    assert_eq!(eval, x);
    let a = t.dropout(x, 0.1, true, 5).unwrap();
    let b = t.dropout(x, 0.1, true, 5).unwrap();
    assert_eq!(t.value(a), t.value(b));
    let kept = t.value(a).iter().filter(|&&v| v != 0.0).count();
    assert!(kept > 850 && kept < 950, "kept {kept}");
    assert!(t.value(a).iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    assert!(t.dropout(x, 1.0, true, 5).is_err());
}

#[test]
fn gradcheck_simple_and_kinks() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let rep = gradcheck_point(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed());

    let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
    let rep = gradcheck_point(
        |t, v| {
            let r = t.relu(v);
            Ok(t.sum(r))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert_eq!(rep.blocks[0].excluded, 1);
    assert_eq!(rep.blocks[0].checked, 2);
    assert!(rep.passed());
}

#[test]
fn gradcheck_rejects_nan() {
    let x = Tensor::new(&[1], vec![1.0]).unwrap();
    let res = gradcheck_point(|t, v| Ok(t.scale(v, f64::NAN)), &x, 1e-5, 1e-6);
    assert!(matches!(res, Err(Error::NumericalFailure(_))));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut t = Tape::new();
        let n = xs.len();
        let x = t.constant(&[n], xs).unwrap();
        let s = t.softmax(x).unwrap();
        let total: f64 = t.value(s).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(t.value(s).iter().all(|&p| p >= 0.0 && p <= 1.0));
    }
}
