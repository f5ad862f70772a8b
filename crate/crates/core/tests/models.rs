mod common;

use cldl_core::tensor::gradcheck;
use cldl_core::{
    ensemble_predict, Architecture, Array, Ensemble, InputShape, ModelView, Param, SubModel, Tensor,
};
use common::*;

const SMALL: InputShape = InputShape {
    channels: 1,
    height: 10,
    width: 10,
};

fn mlp(seed: u64, input: InputShape, d: usize, c: usize) -> SubModel {
    SubModel::new(Architecture::Mlp, input, d, c, &mut rng(seed)).unwrap()
}

fn with_params(model: &SubModel, f: impl Fn(&str, &Array) -> Array) -> SubModel {
    let params = model
        .params()
        .iter()
        .map(|p| Param::new(p.name.clone(), f(&p.name, &p.value)))
        .collect();
    SubModel::from_params(model.arch(), params).unwrap()
}

fn zeroed(model: &SubModel) -> SubModel {
    with_params(model, |_, v| Array::zeros(v.shape()))
}

/// The MLP forward written out with plain loops.
fn mlp_oracle(model: &SubModel, x: &Array) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<&Array> = model.params().iter().map(|p| &p.value).collect();
    let b = x.shape()[0];
    let din = x.numel() / b;
    let h1 = p[0].shape()[1];
    let d = p[2].shape()[1];
    let c = p[4].shape()[1];
    let mut h = matmul(x.data(), p[0].data(), b, din, h1);
    add_bias(&mut h, p[1].data());
    relu(&mut h);
    let mut v = matmul(&h, p[2].data(), b, h1, d);
    add_bias(&mut v, p[3].data());
    let mut logits = matmul(&v, p[4].data(), b, d, c);
    add_bias(&mut logits, p[5].data());
    (v, softmax_rows(&logits, c))
}

#[test]
fn zero_encoder_gives_zero_representation() {
    let model = zeroed(&mlp(0, InputShape::MNIST, 64, 10));
    let x = random(&mut rng(1), &[3, 1, 28, 28], 1.0);
    let v = model.encode(&constant(&x)).unwrap();
    assert_eq!(v.shape(), &[3, 64]);
    assert!(v.data().iter().all(|&e| e == 0.0));
}

#[test]
fn mlp_forward_matches_loop_oracle() {
    let model = mlp(2, SMALL, 16, 5);
    let x = random(&mut rng(3), &[4, 1, 10, 10], 1.0);
    let (v, p) = mlp_oracle(&model, &x);
    assert_close(model.encode(&constant(&x)).unwrap().data(), &v, 1e-12);
    assert_close(model.predict(&constant(&x)).unwrap().data(), &p, 1e-12);
}

#[test]
fn flat_and_image_inputs_agree_for_mlp() {
    let model = mlp(4, SMALL, 8, 3);
    let x = random(&mut rng(5), &[2, 1, 10, 10], 1.0);
    let flat = x.reshape(&[2, 100]).unwrap();
    assert_eq!(
        model.encode(&constant(&x)).unwrap().value(),
        model.encode(&constant(&flat)).unwrap().value()
    );
}

#[test]
fn batching_is_row_consistent() {
    for arch in [Architecture::Mlp, Architecture::CnnSmall] {
        let model = SubModel::new(arch, InputShape::MNIST, 64, 10, &mut rng(6)).unwrap();
        let x = random(&mut rng(7), &[5, 1, 28, 28], 1.0);
        let batched = model.encode(&constant(&x)).unwrap();
        assert_eq!(batched.shape(), &[5, 64]);
        for k in 0..5 {
            let single = model
                .encode(&constant(&x.slice_rows(k, 1).unwrap()))
                .unwrap();
            assert_close(single.data(), batched.value().row(k), 1e-12);
        }
    }
}

#[test]
fn zero_classifier_predicts_uniform() {
    let model = zeroed(&mlp(8, InputShape::MNIST, 64, 10));
    let p = model
        .predict(&constant(&random(&mut rng(9), &[2, 1, 28, 28], 1.0)))
        .unwrap();
    assert!(p.data().iter().all(|&e| (e - 0.1).abs() < 1e-15));
}

#[test]
fn saturated_bias_predicts_class_zero() {
    let model = with_params(&mlp(10, InputShape::MNIST, 64, 10), |name, v| {
        if name == "cls.bias" {
            let mut b = Array::zeros(v.shape());
            b.data_mut()[0] = 10.0;
            b
        } else if name == "cls.weight" {
            Array::zeros(v.shape())
        } else {
            v.clone()
        }
    });
    let p = model
        .predict(&constant(&random(&mut rng(11), &[1, 1, 28, 28], 1.0)))
        .unwrap();
    let e10 = 10f64.exp();
    // softmax([10, 0 x 9]) = e^10 / (e^10 + 9) on class 0: about 4.1e-4 short of one.
    assert!((p.data()[0] - e10 / (e10 + 9.0)).abs() < 1e-14);
    assert!((p.data()[0] - 1.0).abs() < 5e-4);
    assert!(p.data()[1..]
        .iter()
        .all(|&e| (e - 1.0 / (e10 + 9.0)).abs() < 1e-14));
}

#[test]
fn predictions_are_distributions() {
    for arch in [Architecture::Mlp, Architecture::CnnSmall] {
        let model = SubModel::new(arch, InputShape::MNIST, 64, 10, &mut rng(12)).unwrap();
        let p = model
            .predict(&constant(&random(&mut rng(13), &[6, 1, 28, 28], 3.0)))
            .unwrap();
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&e| e > 0.0 && e < 1.0));
        }
    }
}

#[test]
fn classifier_matches_linear_softmax_oracle() {
    let model = mlp(14, SMALL, 6, 4);
    let v = random(&mut rng(15), &[3, 6], 2.0);
    let view = model.view();
    let p = view.classify(&constant(&v)).unwrap();
    let w = &model.params()[4].value;
    let b = &model.params()[5].value;
    let mut logits = matmul(v.data(), w.data(), 3, 6, 4);
    add_bias(&mut logits, b.data());
    assert_close(p.data(), &softmax_rows(&logits, 4), 1e-14);
}

fn gradcheck_model(arch: Architecture, input: InputShape, seed: u64) -> f64 {
    let model = SubModel::new(arch, input, 4, 3, &mut rng(seed)).unwrap();
    let mut params: Vec<Array> = model.params().iter().map(|p| p.value.clone()).collect();
    // Non-zero biases so relu kinks are not hit at exactly zero pre-activations.
    let mut r = rng(seed + 100);
    for (p, meta) in params.iter_mut().zip(model.params()) {
        if meta.name.ends_with(".bias") {
            *p = random(&mut r, p.shape(), 0.3);
        }
    }
    let x = random(&mut r, &[2, input.channels, input.height, input.width], 1.0);
    let y = [0usize, 2];
    gradcheck(
        |ts| {
            let view = ModelView::from_tensors(arch, ts[1..].to_vec());
            let p = view.predict(&ts[0])?;
            // Negative log-likelihood plus a term on v so encoder outputs are checked directly.
            let nll = p.log().slice(1, 0, 1)?.sum_all().scale(-1.0);
            let v = view.encode(&ts[0])?;
            Ok(nll
                .add(&v.mul(&v)?.sum_all().scale(0.1))?
                .add(&p.slice(1, y[1], 1)?.sum_all())?)
        },
        &std::iter::once(x).chain(params).collect::<Vec<_>>(),
        1e-5,
    )
    .unwrap()
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = gradcheck_model(
            Architecture::Mlp,
            InputShape {
                channels: 1,
                height: 3,
                width: 3,
            },
            seed,
        );
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn cnn_gradients_match_finite_differences() {
    for seed in 0..2 {
        let err = gradcheck_model(Architecture::CnnSmall, SMALL, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn cnn_shapes_on_mnist() {
    let model = SubModel::new(
        Architecture::CnnSmall,
        InputShape::MNIST,
        64,
        10,
        &mut rng(16),
    )
    .unwrap();
    let shapes: Vec<&[usize]> = model.params().iter().map(|p| p.value.shape()).collect();
    assert_eq!(shapes[4], &[400, 64]);
    let x = constant(&random(&mut rng(17), &[2, 1, 28, 28], 1.0));
    assert_eq!(model.predict(&x).unwrap().shape(), &[2, 10]);
    assert!(model.encode(&constant(&Array::zeros(&[2, 784]))).is_err());
}

#[test]
fn input_too_small_for_cnn() {
    let tiny = InputShape {
        channels: 1,
        height: 5,
        width: 5,
    };
    assert!(SubModel::new(Architecture::CnnSmall, tiny, 4, 3, &mut rng(0)).is_err());
}

#[test]
fn ensemble_of_identical_members_equals_member() {
    let m = mlp(18, SMALL, 8, 5);
    let ens = Ensemble::new(vec![m.clone(), m.clone()]).unwrap();
    let x = constant(&random(&mut rng(19), &[3, 1, 10, 10], 1.0));
    assert_close(
        ens.predict(&x).unwrap().data(),
        m.predict(&x).unwrap().data(),
        1e-15,
    );
}

#[test]
fn ensemble_of_point_masses_splits_evenly() {
    let base = mlp(20, SMALL, 8, 10);
    let member = |class: usize| {
        with_params(&base, |name, v| match name {
            "cls.bias" => {
                let mut b = Array::zeros(v.shape());
                b.data_mut()[class] = 100.0;
                b
            }
            "cls.weight" => Array::zeros(v.shape()),
            _ => v.clone(),
        })
    };
    let ens = Ensemble::new(vec![member(0), member(1)]).unwrap();
    let p = ens
        .predict(&constant(&random(&mut rng(21), &[1, 1, 10, 10], 1.0)))
        .unwrap();
    let mut want = vec![0.0; 10];
    want[0] = 0.5;
    want[1] = 0.5;
    assert_close(p.data(), &want, 1e-12);
}

#[test]
fn ensemble_mean_matches_recomputation_and_ignores_order() {
    let members: Vec<SubModel> = (0..3).map(|s| mlp(30 + s, SMALL, 8, 5)).collect();
    let x = constant(&random(&mut rng(22), &[4, 1, 10, 10], 1.0));
    let each: Vec<Tensor> = members.iter().map(|m| m.predict(&x).unwrap()).collect();
    let want: Vec<f64> = (0..20)
        .map(|k| each.iter().map(|p| p.data()[k]).sum::<f64>() / 3.0)
        .collect();
    let ens = Ensemble::new(members.clone()).unwrap();
    let got = ens.predict(&x).unwrap();
    assert_close(got.data(), &want, 1e-15);
    for row in got.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let reversed: Vec<ModelView> = members.iter().rev().map(SubModel::view).collect();
    assert_close(
        ensemble_predict(&reversed, &x).unwrap().data(),
        got.data(),
        1e-15,
    );
    assert_eq!(
        ens.predict_labels(x.value()).unwrap(),
        got.value().argmax_rows()
    );
}

#[test]
fn ensemble_members_must_agree() {
    assert!(Ensemble::new(vec![mlp(0, SMALL, 8, 5), mlp(1, SMALL, 4, 5)]).is_err());
    assert!(Ensemble::new(vec![mlp(0, SMALL, 8, 5), mlp(1, SMALL, 8, 3)]).is_err());
}

#[test]
fn initialization_is_seeded() {
    assert_eq!(mlp(40, SMALL, 8, 5), mlp(40, SMALL, 8, 5));
    assert_ne!(mlp(40, SMALL, 8, 5), mlp(41, SMALL, 8, 5));
}
