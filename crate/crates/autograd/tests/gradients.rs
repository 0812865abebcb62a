use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidegan_autograd::gradcheck::check_gradients;
use sidegan_autograd::{grad, no_grad, Csr, SparseMatrix, Tensor};

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn assert_grad(inputs: &[ArrayD<f64>], f: impl Fn(&[Tensor]) -> Tensor) {
    let r = check_gradients(inputs, f, 1e-6, 1e-7, 64);
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn elementwise_ops() {
    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2).mapv(|x| x + 2.5);
    assert_grad(&[a.clone(), b.clone()], |t| t[0].add(&t[1]).mul(&t[0]).div(&t[1]).sum());
    assert_grad(&[a.clone()], |t| t[0].exp().sum().add(&t[0].sigmoid().sum()));
    assert_grad(&[a.clone()], |t| t[0].softplus().mul(&t[0].tanh()).sum());
    assert_grad(&[a.clone()], |t| t[0].sin().add(&t[0].cos()).square().sum());
    assert_grad(&[b.clone()], |t| t[0].ln().add(&t[0].sqrt()).sum());
    assert_grad(&[a.clone()], |t| t[0].leaky_relu(0.2).scale(3.0).add_scalar(1.0).abs().sum());
    assert_grad(&[a], |t| t[0].clamp(-0.5, 0.5).sub(&t[0].neg()).sum());
}

#[test]
fn broadcasting_binary_ops() {
    let a = random(&[5, 1, 3], 3);
    let b = random(&[4, 3], 4);
    assert_grad(&[a, b], |t| t[0].mul(&t[1]).add(&t[1]).square().sum());
}

#[test]
fn matmul_transpose_reshape() {
    let a = random(&[3, 5], 5);
    let b = random(&[5, 2], 6);
    assert_grad(&[a, b], |t| t[0].matmul(&t[1]).t().reshape(&[1, 6]).square().sum());
}

#[test]
fn reductions() {
    let a = random(&[2, 3, 4], 7);
    assert_grad(&[a.clone()], |t| t[0].sum_axis(1, false).square().sum());
    assert_grad(&[a.clone()], |t| t[0].mean_axis(2, true).mul(&t[0]).sum());
    assert_grad(&[a], |t| t[0].sum_to(&[3, 1]).square().broadcast_to(&[2, 3, 4]).mean());
}

#[test]
fn sparse_narrow_pad_concat() {
    let m = SparseMatrix::new(Csr::from_rows(4, vec![vec![(0, 0.5), (3, -1.0)], vec![(2, 2.0)], vec![]]));
    let a = random(&[4, 3], 8);
    let b = random(&[3, 2], 9);
    assert_grad(&[a.clone()], |t| t[0].spmm(&m).square().sum());
    assert_grad(&[a.clone()], |t| t[0].narrow(1, 1, 2).pad(0, 1, 6).square().sum());
    assert_grad(&[a, b], |t| Tensor::concat(&[t[0].narrow(0, 0, 3), t[1].clone()], 1).square().sum());
}

/// The gradient of a gradient, checked by differencing the first-order gradient.
#[test]
fn second_order_through_mlp() {
    let x = random(&[2, 3], 10);
    let w1 = random(&[3, 4], 11);
    let w2 = random(&[4, 1], 12);
    let penalty = |t: &[Tensor]| {
        let h = t[0].matmul(&t[1]).softplus().matmul(&t[2]).sum();
        let gx = grad(&h, &[&t[0]], true).remove(0);
        gx.square().sum()
    };
    assert_grad(&[x, w1, w2], penalty);
}

#[test]
fn second_order_through_leaky_relu_and_sparse() {
    let x = random(&[4, 2], 13);
    let w = random(&[2, 3], 14);
    let m = SparseMatrix::new(Csr::from_rows(4, vec![vec![(0, 1.0), (1, 1.0)], vec![(2, 0.5), (3, 1.0)]]));
    let penalty = |t: &[Tensor]| {
        let h = t[0].spmm(&m).matmul(&t[1]).leaky_relu(0.2).sum();
        grad(&h, &[&t[0]], true).remove(0).square().sum()
    };
    assert_grad(&[x, w], penalty);
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let a = Tensor::param(random(&[2, 2], 15));
    let b = Tensor::param(random(&[3], 16));
    let g = grad(&a.square().sum(), &[&a, &b], false);
    assert!(g[1].to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn no_grad_builds_constants() {
    let a = Tensor::param(random(&[2], 17));
    let out = no_grad(|| a.exp().sum());
    assert!(!out.requires_grad());
}

#[test]
fn softplus_is_overflow_safe() {
    let t = Tensor::from_vec(&[3], vec![1000.0, -1000.0, 0.0]).softplus().to_vec();
    assert_eq!(t[0], 1000.0);
    assert_eq!(t[1], 0.0);
    assert!((t[2] - std::f64::consts::LN_2).abs() < 1e-15);
    let _ = Rng::random::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-5.0..5.0f64, n)))
    }

    proptest! {
        // d/dx sum(x * y) = y and d/dx sum(x^2) = 2x, exactly.
        #[test]
        fn product_and_square_gradients((x, y) in vec_pair()) {
            let n = x.len();
            let xt = Tensor::param(ArrayD::from_shape_vec(IxDyn(&[n]), x.clone()).unwrap());
            let yt = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n]), y.clone()).unwrap());
            let g = grad(&xt.mul(&yt).sum(), &[&xt], false).remove(0);
            prop_assert_eq!(g.to_vec(), y);
            let g = grad(&xt.square().sum(), &[&xt], false).remove(0);
            prop_assert_eq!(g.to_vec(), x.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        }

        // A broadcast operand collects the summed gradient of every copy.
        #[test]
        fn broadcast_gradient_sums_over_copies(rows in 1usize..6, (x, _) in vec_pair()) {
            let n = x.len();
            let xt = Tensor::param(ArrayD::from_shape_vec(IxDyn(&[1, n]), x).unwrap());
            let out = xt.broadcast_to(&[rows, n]).sum();
            let g = grad(&out, &[&xt], false).remove(0);
            prop_assert_eq!(g.shape(), &[1, n][..]);
            prop_assert!(g.to_vec().iter().all(|&v| v == rows as f64));
        }
    }
}
