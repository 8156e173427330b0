//! Reverse-mode gradients of every differentiable op against central
//! differences in f64.

use dsaf_tensor::attention::{triplet_attention, zpool, GateWeights, TripletWeights};
use dsaf_tensor::deform::{deform_conv2d, DeformConvWeights};
use dsaf_tensor::gradcheck::{check_gradients, GradCheckOptions};
use dsaf_tensor::{PoolKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn assert_close(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> dsaf_tensor::Result<Var<f64>>, tol: f64) {
    let r = check_gradients(inputs, f, opts()).unwrap();
    assert!(r.max_rel_err() < tol, "{r:?}");
}

/// Values whose fractional parts stay in [0.2, 0.8] so that finite
/// differences never straddle a bilinear kink.
fn off_grid(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..0.8);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn mul_at_fixed_point() {
    let a = Tensor::from_f64(vec![2], &[0.3, -1.2]).unwrap();
    let b = Tensor::from_f64(vec![2], &[2.0, 5.0]).unwrap();
    assert_close(&[a, b], |v| v[0].mul(&v[1]), 1e-4);
}

#[test]
fn elementwise_with_broadcast() {
    let a = rand(&[2, 3, 4], 1);
    let b = rand(&[2, 1, 4], 2);
    assert_close(&[a.clone(), b.clone()], |v| v[0].add(&v[1]), 1e-4);
    assert_close(&[a.clone(), b.clone()], |v| v[0].sub(&v[1]), 1e-4);
    assert_close(&[a, b], |v| v[0].mul(&v[1]), 1e-4);
}

#[test]
fn activations() {
    let a = rand(&[3, 5], 3).map(|v| 4.0 * v);
    assert_close(std::slice::from_ref(&a), |v| Ok(v[0].sigmoid()), 1e-4);
    assert_close(std::slice::from_ref(&a), |v| Ok(v[0].silu()), 1e-4);
    assert_close(&[a], |v| Ok(v[0].scale(-2.5)), 1e-4);
}

#[test]
fn matmul_random() {
    assert_close(&[rand(&[3, 4], 4), rand(&[4, 2], 5)], |v| v[0].matmul(&v[1]), 1e-4);
}

#[test]
fn reductions() {
    let x = rand(&[3, 4, 5], 6);
    for axis in 0..3 {
        assert_close(std::slice::from_ref(&x), |v| v[0].max_axis(axis, false), 1e-4);
        assert_close(std::slice::from_ref(&x), |v| v[0].mean_axis(axis, true), 1e-4);
        assert_close(std::slice::from_ref(&x), |v| v[0].sum_axis(axis, false), 1e-4);
    }
}

#[test]
fn data_movement() {
    let x = rand(&[2, 3, 4], 7);
    assert_close(std::slice::from_ref(&x), |v| v[0].permute(&[0, 2, 1]), 1e-4);
    assert_close(std::slice::from_ref(&x), |v| v[0].reshape(vec![6, 4]), 1e-4);
    assert_close(&[x.clone(), rand(&[2, 2, 4], 8)], |v| Var::concat(&[&v[0], &v[1]], 1), 1e-4);
    assert_close(
        &[x],
        |v| {
            let parts = v[0].split(2, 2)?;
            parts[0].mul(&parts[1])
        },
        1e-4,
    );
}

#[test]
fn conv_family() {
    let x = rand(&[2, 4, 5, 6], 9);
    assert_close(
        &[x.clone(), rand(&[3, 4, 3, 3], 10), rand(&[3], 11)],
        |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1, 1),
        1e-4,
    );
    assert_close(
        &[x.clone(), rand(&[6, 2, 3, 3], 12)],
        |v| v[0].conv2d(&v[1], None, 2, 1, 2),
        1e-4,
    );
    assert_close(
        &[x.clone(), rand(&[4, 1, 3, 3], 13)],
        |v| v[0].depthwise_conv2d(&v[1], None, 1, 1),
        1e-4,
    );
    assert_close(
        &[x, rand(&[5, 4, 1, 1], 14), rand(&[5], 15)],
        |v| v[0].pointwise_conv2d(&v[1], Some(&v[2])),
        1e-4,
    );
}

#[test]
fn batchnorm_both_modes() {
    let x = rand(&[3, 2, 4, 4], 16);
    let (g, b) = (rand(&[2], 17), rand(&[2], 18));
    for training in [true, false] {
        assert_close(
            &[x.clone(), g.clone(), b.clone()],
            |v| {
                let rm = Tensor::from_f64(vec![2], &[0.1, -0.2]).unwrap();
                let rv = Tensor::from_f64(vec![2], &[0.9, 1.3]).unwrap();
                Ok(v[0].batch_norm2d(&v[1], &v[2], &rm, &rv, 1e-3, training)?.0)
            },
            1e-4,
        );
    }
}

#[test]
fn pooling_unfold_upsample() {
    // distinct values keep the max-pool argmax stable under perturbation
    let x = Tensor::new(
        vec![1, 2, 6, 6],
        (0..72).map(|i| ((i * 37) % 72) as f64 * 0.1).collect(),
    )
    .unwrap();
    assert_close(std::slice::from_ref(&x), |v| v[0].pool2d(PoolKind::Max, 2, 2), 1e-4);
    assert_close(std::slice::from_ref(&x), |v| v[0].pool2d(PoolKind::Avg, 3, 1), 1e-4);
    assert_close(std::slice::from_ref(&x), |v| v[0].pool2d_padded(PoolKind::Max, 5, 1, 2), 1e-4);
    assert_close(std::slice::from_ref(&x), |v| v[0].unfold2d(2, 2), 1e-4);
    assert_close(&[x], |v| v[0].upsample_nearest2x(), 1e-4);
}

#[test]
fn bilinear_position_gradient() {
    let x = rand(&[3, 4, 4], 19);
    let pos = Tensor::from_f64(vec![2], &[0.3, 0.7]).unwrap();
    assert_close(&[x, pos], |v| v[0].bilinear_sample(&v[1]), 1e-4);
}

#[test]
fn deform_core_wrt_every_input() {
    let x = rand(&[1, 2, 5, 5], 20);
    let off = off_grid(&[1, 18, 5, 5], 21);
    let mask = Tensor::uniform(vec![1, 9, 5, 5], 0.1, 0.9, &mut ChaCha8Rng::seed_from_u64(22));
    let w = rand(&[3, 2, 3, 3], 23);
    let b = rand(&[3], 24);
    let r = check_gradients(
        &[x, off, mask, w, b],
        |v| v[0].modulated_deform_conv2d(&v[1], &v[2], &v[3], Some(&v[4]), 1, 1),
        GradCheckOptions { max_coords: 450, ..opts() },
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-3, "{r:?}");
}

#[test]
fn deform_layer_with_predicted_offsets() {
    // small non-zero offset weights: samples leave the integer grid
    let x = rand(&[2, 2, 5, 5], 25);
    let ow = rand(&[18, 2, 3, 3], 26).map(|v| 0.2 * v);
    let ob = off_grid(&[18], 27);
    let mw = rand(&[9, 2, 3, 3], 28);
    let mb = rand(&[9], 29);
    let w = rand(&[3, 2, 3, 3], 30);
    let r = check_gradients(
        &[x, ow, ob, mw, mb, w],
        |v| {
            let p = DeformConvWeights {
                weight: &v[5],
                bias: None,
                offset_weight: &v[1],
                offset_bias: &v[2],
                mask_weight: &v[3],
                mask_bias: &v[4],
            };
            deform_conv2d(&v[0], p, 2, 1)
        },
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-3, "{r:?}");
}

#[test]
fn zpool_and_triplet() {
    let x = Tensor::new(
        vec![2, 3, 4, 5],
        (0..120).map(|i| ((i * 53) % 120) as f64 / 60.0 - 1.0).collect(),
    )
    .unwrap();
    assert_close(std::slice::from_ref(&x), |v| zpool(&v[0]), 1e-4);
    let gates: Vec<Tensor<f64>> = (0..3).map(|k| rand(&[1, 2, 7, 7], 31 + k).map(|v| 0.3 * v)).collect();
    let biases: Vec<Tensor<f64>> = (0..3).map(|k| rand(&[1], 40 + k)).collect();
    let mut inputs = vec![x];
    inputs.extend(gates);
    inputs.extend(biases);
    for no_spatial in [false, true] {
        assert_close(
            &inputs,
            |v| {
                let g = |i: usize| GateWeights { weight: &v[1 + i], bias: &v[4 + i] };
                triplet_attention(&v[0], TripletWeights { branches: [g(0), g(1), g(2)], no_spatial })
            },
            1e-4,
        );
    }
}
