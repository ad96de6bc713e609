use detr_tensor::gradcheck::check_gradients;
use detr_tensor::{bilinear_sample, conv2d, multi_head_attention, sigmoid_focal_loss, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// Contracts `x` against fixed weights so that no gradient cancels by symmetry.
fn project(x: &Tensor, w: &[f64]) -> Tensor {
    x.mul(&t(x.shape(), w[..x.numel()].to_vec())).unwrap().sum()
}

fn assert_grad<F: Fn(&[Tensor]) -> Tensor>(f: F, inputs: &[Tensor]) {
    let r = check_gradients(f, inputs, H).unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

/// Keeps a pixel coordinate away from integer tap boundaries.
fn off_kink(v: f64, side: usize) -> bool {
    let p = v * (side as f64 - 1.0);
    (p - p.round()).abs() > 1e-3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in values(35)) {
        let x = t(&[rows, cols], seed[..rows * cols].iter().map(|v| v * 20.0).collect());
        for axis in 0..2 {
            let y = x.softmax(axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
            for o in 0..outer {
                let s: f64 = (0..inner)
                    .map(|i| if axis == 1 { y.data()[o * cols + i] } else { y.data()[i * cols + o] })
                    .sum();
                prop_assert!((s - 1.0).abs() <= 1e-12, "sum {s}");
            }
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs(a in values(12), b in values(12)) {
        let x = Tensor::param(&[3, 4], a.clone()).unwrap();
        let y = Tensor::param(&[4, 3], b.clone()).unwrap();
        let loss = x.matmul(&y).unwrap().softmax(1).unwrap().mul(&x.matmul(&y).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        prop_assert_eq!(x.to_vec(), a);
        prop_assert_eq!(y.to_vec(), b);
    }

    #[test]
    fn grad_matmul_linear_softmax(a in values(12), b in values(12), bias in values(3), w in values(12)) {
        let inputs = [t(&[4, 3], a), t(&[3, 3], b[..9].to_vec()), t(&[3], bias)];
        assert_grad(|x| project(&x[0].matmul(&x[1]).unwrap().softmax(1).unwrap(), &w), &inputs);
        assert_grad(|x| project(&x[0].linear(&x[1], &x[2]).unwrap().sigmoid(), &w), &inputs);
        assert_grad(|x| project(&x[0].transpose().unwrap().softmax(0).unwrap(), &w), &inputs);
    }

    #[test]
    fn grad_norms(a in values(24), g in values(6), be in values(6), w in values(24)) {
        let inputs = [t(&[4, 6], a.clone()), t(&[6], g.clone()), t(&[6], be.clone())];
        assert_grad(|x| project(&x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap(), &w), &inputs);
        let inputs = [t(&[2, 3, 4], a), t(&[2], g[..2].to_vec()), t(&[2], be[..2].to_vec())];
        assert_grad(|x| project(&x[0].group_norm(1, &x[1], &x[2], 1e-5).unwrap(), &w), &inputs);
    }

    #[test]
    fn grad_elementwise(a in prop::collection::vec(0.2f64..2.0, 6), w in values(6)) {
        let inputs = [t(&[6], a)];
        assert_grad(|x| project(&x[0].ln().exp().mul(&x[0]).unwrap(), &w), &inputs);
        assert_grad(|x| project(&x[0].scale(0.3).inverse_sigmoid(1e-5), &w), &inputs);
    }

    #[test]
    fn grad_conv2d(x in values(2 * 5 * 5), k in values(3 * 2 * 9), b in values(3), stride in 1usize..3, w in values(3 * 25)) {
        let inputs = [t(&[2, 5, 5], x), t(&[3, 2, 3, 3], k), t(&[3], b)];
        assert_grad(|v| project(&conv2d(&v[0], &v[1], Some(&v[2]), stride, 1).unwrap(), &w), &inputs);
    }

    #[test]
    fn grad_bilinear_sample(map in values(3 * 4 * 5), xy in prop::collection::vec(-0.2f64..1.2, 8), w in values(3)) {
        prop_assume!(xy.chunks(2).all(|p| off_kink(p[0], 5) && off_kink(p[1], 4)));
        for pt in xy.chunks(2) {
            let inputs = [t(&[3, 4, 5], map.clone()), t(&[2], pt.to_vec())];
            assert_grad(|v| project(&bilinear_sample(&v[0], &v[1]).unwrap(), &w), &inputs);
        }
    }

    #[test]
    fn grad_attention(q in values(3 * 4), k in values(5 * 4), v in values(5 * 4), w in values(12)) {
        let inputs = [t(&[3, 4], q), t(&[5, 4], k), t(&[5, 4], v)];
        assert_grad(|x| project(&multi_head_attention(&x[0], &x[1], &x[2], 2).unwrap(), &w), &inputs);
    }

    #[test]
    fn grad_focal_and_giou(logits in values(6), targets in prop::collection::vec(prop::bool::ANY, 6),
                           a in prop::collection::vec(0.3f64..0.7, 8), b in prop::collection::vec(0.1f64..0.4, 8)) {
        let tg: Vec<f64> = targets.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        assert_grad(|x| sigmoid_focal_loss(&x[0], &tg, 0.25, 2.0).unwrap(), &[t(&[2, 3], logits)]);
        // centers in the middle and sizes small enough that no corner touches the clamp
        let boxes = |c: &[f64], s: &[f64]| (0..2).flat_map(|i| [c[2 * i], c[2 * i + 1], s[2 * i], s[2 * i + 1]]).collect::<Vec<_>>();
        let inputs = [t(&[2, 4], boxes(&a[..4], &b[..4])), t(&[2, 4], boxes(&a[4..], &b[4..]))];
        assert_grad(|x| x[0].giou_pairs(&x[1]).unwrap().sum(), &inputs);
    }
}

#[test]
fn backward_examples() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let loss = x.sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);

    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);

    let y = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(y.scale(2.0).backward().is_err());
}
