mod common;

use acseg::acg::{AcgConfig, AcgParams};
use acseg::modularity::{BatchReduction, LossOptions};
use acseg::trainer::{image_loss, image_loss_grad};
use acseg::Tensor;
use common::{gradcheck, rng, uniform};

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let a = uniform(&mut r, 3, 4, -1.0, 1.0);
    let b = uniform(&mut r, 3, 4, -1.0, 1.0);
    let ins = [a, b];
    assert!(gradcheck(&ins, |t, v| t.add(v[0], v[1]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins, |t, v| t.sub(v[0], v[1]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins, |t, v| t.mul(v[0], v[1]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.scale(v[0], -2.5).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.relu(v[0]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.transpose(v[0]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.reshape(v[0], &[2, 6]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.sum(v[0]).unwrap(), H) < TOL);
    assert!(gradcheck(&ins[..1], |t, v| t.mean(v[0]).unwrap(), H) < TOL);
}

#[test]
fn products() {
    let mut r = rng(2);
    let a = uniform(&mut r, 3, 4, -1.0, 1.0);
    let b = uniform(&mut r, 4, 5, -1.0, 1.0);
    let c = uniform(&mut r, 5, 4, -1.0, 1.0);
    assert!(gradcheck(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone(), c], |t, v| t.matmul_nt(v[0], v[1]).unwrap(), H) < TOL);
    let p = uniform(&mut r, 3, 4, 0.1, 1.0);
    assert!(gradcheck(&[p.clone(), p], |t, v| t.pair_product(v[0], v[1]).unwrap(), H) < TOL);
}

#[test]
fn row_ops() {
    let mut r = rng(3);
    let a = uniform(&mut r, 4, 5, -2.0, 2.0);
    let row = uniform(&mut r, 1, 5, -1.0, 1.0);
    assert!(gradcheck(&[a.clone()], |t, v| t.softmax_rows(v[0]).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone()], |t, v| t.layer_norm(v[0], 1e-5).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone()], |t, v| t.l2_normalize_rows(v[0], 1e-12).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone()], |t, v| t.row_max(v[0]).unwrap().0, H) < TOL);
    assert!(gradcheck(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone(), row], |t, v| t.mul_row(v[0], v[1]).unwrap(), H) < TOL);
}

#[test]
fn column_ops_and_resize() {
    let mut r = rng(4);
    let a = uniform(&mut r, 6, 4, -1.0, 1.0);
    let b = uniform(&mut r, 6, 2, -1.0, 1.0);
    assert!(gradcheck(&[a.clone()], |t, v| t.select_cols(v[0], 1, 3).unwrap(), H) < TOL);
    assert!(gradcheck(&[a.clone(), b], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(), H) < TOL);
    assert!(gradcheck(&[a], |t, v| t.bilinear_resize(v[0], (2, 3), (5, 7)).unwrap(), H) < TOL);
}

#[test]
fn fused_pair_max() {
    let mut r = rng(5);
    let a = uniform(&mut r, 5, 3, -1.0, 1.0);
    let w = uniform(&mut r, 5, 5, -1.0, 1.0);
    assert!(gradcheck(&[a, w], |t, v| t.weighted_pair_max(v[0], v[1]).unwrap(), H) < TOL);
}

/// Central differences of the full loss over every parameter entry.
fn full_model_error(params: &AcgParams, x: &Tensor<f64>, opts: &LossOptions) -> f64 {
    let (_, grads) = image_loss_grad(params, x, opts).unwrap().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t].data_mut()[i] -= h;
            let numeric = (image_loss(&plus, x, opts).unwrap().unwrap() - image_loss(&minus, x, opts).unwrap().unwrap()) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn full_model_matches_finite_differences() {
    let mut r = rng(6);
    let x = uniform(&mut r, 12, 8, -1.0, 1.0);
    let cfg = AcgConfig {
        prototype_init_std: 1.0,
        residual_init_scale: 1.0,
        ..AcgConfig::new(3, 8, 2).with_seed(11)
    };
    let params = AcgParams::init(cfg).unwrap();
    let opts = LossOptions::default();
    assert!(full_model_error(&params, &x, &opts) < 1e-3);
}

#[test]
fn full_model_without_diagonal_and_with_heads() {
    let mut r = rng(7);
    let x = uniform(&mut r, 10, 8, -1.0, 1.0);
    let cfg = AcgConfig {
        prototype_init_std: 1.0,
        ..AcgConfig::new(3, 8, 1).with_seed(2).with_heads(2)
    };
    let params = AcgParams::init(cfg).unwrap();
    let opts = LossOptions {
        include_diagonal: false,
        batch_reduction: BatchReduction::Mean,
    };
    assert!(full_model_error(&params, &x, &opts) < 1e-3);
}

#[test]
fn reassociated_attention_has_same_gradient() {
    // more pixels than channels takes the reassociated attention path
    let mut r = rng(8);
    let x = uniform(&mut r, 20, 4, -1.0, 1.0);
    let cfg = AcgConfig {
        prototype_init_std: 1.0,
        ..AcgConfig::new(3, 4, 1).with_seed(5)
    };
    let params = AcgParams::init(cfg).unwrap();
    assert!(full_model_error(&params, &x, &LossOptions::default()) < 1e-3);
}
