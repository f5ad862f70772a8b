mod common;

use cldl_core::tensor::gradcheck;
use cldl_core::{
    gradient_alignment_loss, jsd, label_diversity_loss, one_hot, total_loss, truncate_sld,
    Architecture, Array, DiversityWeights, Ensemble, Graph, InputShape, LabelConfusionModel,
    LcmView, ModelView, Tensor,
};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn vector(v: &[f64]) -> Tensor {
    Tensor::constant(Array::vector(v.to_vec()))
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    Tensor::constant(Array::new(vec![v.len(), v[0].len()], v.concat()).unwrap())
}

#[test]
fn truncation_examples() {
    let out = truncate_sld(&vector(&[0.7, 0.2, 0.1]), &[0]).unwrap();
    assert_close(out.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    let uniform = truncate_sld(&vector(&[0.2; 5]), &[3]).unwrap();
    assert_close(uniform.data(), &[0.25; 4], 1e-15);
    let mut r = rng(1);
    let s: Vec<Vec<f64>> = (0..6).map(|_| simplex(&mut r, 7)).collect();
    let y = [0, 6, 3, 3, 1, 5];
    let got = truncate_sld(&rows(&s), &y).unwrap();
    assert_eq!(got.shape(), &[6, 6]);
    let want: Vec<f64> = s
        .iter()
        .zip(y)
        .flat_map(|(row, label)| truncate(row, label))
        .collect();
    assert_close(got.data(), &want, 1e-15);
    assert!(truncate_sld(&rows(&s), &[0]).is_err());
    assert!(truncate_sld(&vector(&[0.5, 0.5]), &[2]).is_err());
}

#[test]
fn jsd_identities_and_oracle() {
    let p = [0.1, 0.6, 0.3];
    assert_eq!(jsd(&vector(&p), &vector(&p)).unwrap().item(), 0.0);
    let disjoint = jsd(&vector(&[1.0, 0.0]), &vector(&[0.0, 1.0]))
        .unwrap()
        .item();
    assert!((disjoint - 2f64.ln()).abs() < 1e-10);
    let mut r = rng(2);
    for _ in 0..20 {
        let k = r.random_range(2..10);
        let (a, b) = (simplex(&mut r, k), simplex(&mut r, k));
        let v = jsd(&vector(&a), &vector(&b)).unwrap().item();
        assert!((v - common::jsd(&a, &b)).abs() < 1e-14);
        assert!((0.0..=2f64.ln()).contains(&v));
    }
    assert!(jsd(&vector(&[0.5, 0.5]), &vector(&[0.2, 0.3, 0.5])).is_err());
}

proptest! {
    #[test]
    fn jsd_is_bitwise_symmetric(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12)) {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.into_iter().map(|e| (e + 1e-9 / 12.0) / s).collect::<Vec<_>>()
        };
        let p = norm(raw.iter().map(|x| x.0).collect());
        let q = norm(raw.iter().map(|x| x.1).collect());
        let pq = jsd(&vector(&p), &vector(&q)).unwrap().item();
        let qp = jsd(&vector(&q), &vector(&p)).unwrap().item();
        prop_assert_eq!(pq.to_bits(), qp.to_bits());
        prop_assert!(pq >= -1e-15 && pq <= 2f64.ln() + 1e-12);
    }
}

#[test]
fn label_diversity_cases() {
    let s = vec![0.2, 0.5, 0.3];
    assert_eq!(
        label_diversity_loss(&[vector(&s), vector(&s), vector(&s)])
            .unwrap()
            .item(),
        0.0
    );

    let mut r = rng(3);
    let (a, b, c) = (simplex(&mut r, 4), simplex(&mut r, 4), simplex(&mut r, 4));
    let two = label_diversity_loss(&[vector(&a), vector(&b)])
        .unwrap()
        .item();
    assert!((two - common::jsd(&a, &b)).abs() < 1e-14);

    let three = label_diversity_loss(&[vector(&a), vector(&b), vector(&c)])
        .unwrap()
        .item();
    let pairs = [
        common::jsd(&a, &b),
        common::jsd(&a, &c),
        common::jsd(&b, &c),
    ];
    let want = (pairs.iter().map(|j| j.exp()).sum::<f64>() / 3.0).ln();
    assert!((three - want).abs() < 1e-14);
    assert!(label_diversity_loss(&[vector(&a)]).is_err());
}

#[test]
fn gradient_alignment_cases() {
    let g = |v: &[f64]| Tensor::constant(Array::new(vec![1, v.len()], v.to_vec()).unwrap());
    let same = gradient_alignment_loss(&[g(&[0.3, -1.0, 2.0]), g(&[0.3, -1.0, 2.0])]).unwrap();
    assert!((same.item() - 1.0).abs() < 1e-15);
    assert_eq!(
        gradient_alignment_loss(&[g(&[1.0, 0.0]), g(&[0.0, 1.0])])
            .unwrap()
            .item(),
        0.0
    );
    let anti = gradient_alignment_loss(&[g(&[1.5, -0.5]), g(&[-1.5, 0.5])]).unwrap();
    assert!((anti.item() - 1.0).abs() < 1e-15);
    let zero = gradient_alignment_loss(&[g(&[0.0, 0.0]), g(&[1.0, 2.0])]).unwrap();
    assert_eq!(zero.item(), 0.0);
    assert!(gradient_alignment_loss(&[g(&[1.0])]).is_err());

    // Batched, image-shaped gradients are flattened per example.
    let mut r = rng(4);
    let grads: Vec<Array> = (0..3).map(|_| random(&mut r, &[2, 1, 2, 2], 1.0)).collect();
    let got = gradient_alignment_loss(&grads.iter().map(constant).collect::<Vec<_>>()).unwrap();
    for b in 0..2 {
        let row = |a: &Array| a.data()[b * 4..(b + 1) * 4].to_vec();
        let cos = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let n = |w: &[f64]| w.iter().map(|e| e * e).sum::<f64>().sqrt();
            (dot / (n(u) * n(v))).abs()
        };
        let (a, bb, c) = (row(&grads[0]), row(&grads[1]), row(&grads[2]));
        let want = (cos(&a, &bb) + cos(&a, &c) + cos(&bb, &c)) / 3.0;
        assert!((got.data()[b] - want).abs() < 1e-14);
    }
}

struct Setup {
    ensemble: Ensemble,
    lcm: LabelConfusionModel,
    images: Array,
    labels: Vec<usize>,
}

const INPUT: InputShape = InputShape {
    channels: 1,
    height: 2,
    width: 2,
};

fn setup(seed: u64, n: usize, batch: usize, d: usize, c: usize) -> Setup {
    let mut r = rng(seed);
    let ensemble = Ensemble::init(n, Architecture::Mlp, INPUT, d, c, &mut r).unwrap();
    let lcm = LabelConfusionModel::new(c, d, 3.0, &mut r).unwrap();
    let images = random(&mut r, &[batch, 1, 2, 2], 1.0).map(|v| v.abs());
    let labels = (0..batch).map(|_| r.random_range(0..c)).collect();
    Setup {
        ensemble,
        lcm,
        images,
        labels,
    }
}

fn evaluate(s: &Setup, w: DiversityWeights) -> cldl_core::EnsembleLossReport {
    total_loss(
        &Graph::new(),
        &s.ensemble.views(),
        &s.lcm.view(),
        &s.images,
        &s.labels,
        w,
    )
    .unwrap()
}

#[test]
fn without_diversity_total_is_mean_kl() {
    let s = setup(5, 3, 4, 6, 4);
    let rep = evaluate(&s, DiversityWeights::NONE);
    assert_eq!(rep.total.item(), rep.mean_kl.item());
}

#[test]
fn report_recombines_and_matches_oracle() {
    let s = setup(6, 2, 4, 6, 4);
    let w = DiversityWeights::new(0.7, 1.3).unwrap();
    let rep = evaluate(&s, w);
    let recombined = rep.mean_kl.item() - w.alpha * rep.label_diversity.item()
        + w.beta * rep.gradient_alignment.item();
    assert!((rep.total.item() - recombined).abs() < 1e-10);

    // Per-member KL and l_ld from loop oracles on the same forward values.
    let y = Tensor::constant(one_hot(&s.labels, 4).unwrap());
    let x = constant(&s.images);
    let lcm = s.lcm.view();
    let mut truncated = Vec::new();
    for (i, m) in s.ensemble.members().iter().enumerate() {
        let v = m.encode(&x).unwrap();
        let p = m.view().classify(&v).unwrap();
        let sld = lcm.simulated_label_distribution(&v, &y, i).unwrap().sld;
        let kls: Vec<f64> = (0..4)
            .map(|b| kl(sld.value().row(b), p.value().row(b)))
            .collect();
        assert!((rep.per_model_kl[i].item() - kls.iter().sum::<f64>() / 4.0).abs() < 1e-14);
        truncated.push(
            (0..4)
                .map(|b| truncate(sld.value().row(b), s.labels[b]))
                .collect::<Vec<_>>(),
        );
    }
    let ld: f64 = (0..4)
        .map(|b| common::jsd(&truncated[0][b], &truncated[1][b]))
        .sum::<f64>()
        / 4.0;
    assert!((rep.label_diversity.item() - ld).abs() < 1e-14);
    let mean_kl = (rep.per_model_kl[0].item() + rep.per_model_kl[1].item()) / 2.0;
    assert!((rep.mean_kl.item() - mean_kl).abs() < 1e-15);
}

#[test]
fn identical_members_have_no_diversity() {
    let s = setup(7, 1, 3, 5, 4);
    let member = s.ensemble.members()[0].clone();
    let twins = Setup {
        ensemble: Ensemble::new(vec![member.clone(), member]).unwrap(),
        ..s
    };
    let beta = 0.8;
    let rep = evaluate(&twins, DiversityWeights::new(1.0, beta).unwrap());
    assert_eq!(rep.label_diversity.item(), 0.0);
    assert!((rep.gradient_alignment.item() - 1.0).abs() < 1e-12);
    assert!((rep.total.item() - (rep.mean_kl.item() + beta)).abs() < 1e-12);
}

#[test]
fn single_member_reports_zero_diversity() {
    let s = setup(8, 1, 3, 5, 4);
    let rep = evaluate(&s, DiversityWeights::new(1.0, 1.0).unwrap());
    assert_eq!(rep.label_diversity.item(), 0.0);
    assert_eq!(rep.gradient_alignment.item(), 0.0);
    assert_eq!(rep.total.item(), rep.mean_kl.item());
}

#[test]
fn diversity_terms_stay_in_range_over_random_ensembles() {
    let mut r = rng(9);
    for k in 0..1000u64 {
        let n = r.random_range(2..5);
        let c = r.random_range(2..6);
        let batch = r.random_range(1..4);
        let s = setup(1000 + k, n, batch, 3, c);
        let rep = evaluate(&s, DiversityWeights::NONE);
        let (ld, gd) = (rep.label_diversity.item(), rep.gradient_alignment.item());
        assert!((0.0..=2f64.ln()).contains(&ld), "ensemble {k}: l_ld = {ld}");
        assert!(
            (0.0..=1.0 + 1e-12).contains(&gd),
            "ensemble {k}: l_gd = {gd}"
        );
    }
}

#[test]
fn total_loss_rejects_bad_batches() {
    let s = setup(10, 2, 3, 4, 3);
    let views = s.ensemble.views();
    let lcm = s.lcm.view();
    assert!(total_loss(
        &Graph::new(),
        &views,
        &lcm,
        &s.images,
        &s.labels[..2],
        DiversityWeights::NONE
    )
    .is_err());
    assert!(total_loss(
        &Graph::new(),
        &[],
        &lcm,
        &s.images,
        &s.labels,
        DiversityWeights::NONE
    )
    .is_err());
}

/// Truncated-SLD JSD along a segment between two confusion vectors never
/// decreases as the second one moves away from the first.
#[test]
fn truncated_jsd_is_monotone_along_confusion_segments() {
    let mut r = rng(11);
    for _ in 0..100 {
        let c = r.random_range(3..10);
        let y = r.random_range(0..c);
        let gamma = r.random_range(0.0..6.0);
        let (ca, cb) = (simplex(&mut r, c), simplex(&mut r, c));
        let sld = |lcv: &[f64]| {
            let logits: Vec<f64> = lcv
                .iter()
                .enumerate()
                .map(|(k, &v)| v + if k == y { gamma } else { 0.0 })
                .collect();
            softmax(&logits)
        };
        let anchor = truncate_sld(&vector(&sld(&ca)), &[y]).unwrap();
        let mut prev_lcv = -1.0;
        let mut prev_trunc = -1.0;
        for step in 0..10 {
            let t = step as f64 / 9.0;
            let cj: Vec<f64> = ca
                .iter()
                .zip(&cb)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let lcv_jsd = common::jsd(&ca, &cj);
            let trunc = jsd(&anchor, &truncate_sld(&vector(&sld(&cj)), &[y]).unwrap())
                .unwrap()
                .item();
            assert!(lcv_jsd >= prev_lcv - 1e-15);
            assert!(
                trunc >= prev_trunc - 1e-15,
                "t = {t}: {trunc} < {prev_trunc}"
            );
            prev_lcv = lcv_jsd;
            prev_trunc = trunc;
        }
    }
}

fn gradcheck_total(seed: u64, weights: DiversityWeights) -> f64 {
    let s = setup(seed, 2, 3, 4, 3);
    let arch = Architecture::Mlp;
    let np = s.ensemble.members()[0].params().len();
    let mut r = rng(seed + 50);
    let inputs: Vec<Array> = s
        .ensemble
        .members()
        .iter()
        .flat_map(|m| m.params())
        .chain(s.lcm.params())
        .map(|p| {
            if p.name.ends_with("bias") {
                random(&mut r, p.value.shape(), 0.2)
            } else {
                p.value.clone()
            }
        })
        .collect();
    let gamma = s.lcm.gamma();
    gradcheck(
        |ts| {
            let graph = ts
                .iter()
                .find_map(|t| t.graph().cloned())
                .unwrap_or_default();
            let members = [
                ModelView::from_tensors(arch, ts[..np].to_vec()),
                ModelView::from_tensors(arch, ts[np..2 * np].to_vec()),
            ];
            let lcm = LcmView::from_tensors(gamma, ts[2 * np..].to_vec());
            Ok(total_loss(&graph, &members, &lcm, &s.images, &s.labels, weights)?.total)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn objective_gradients_without_alignment_term() {
    let err = gradcheck_total(12, DiversityWeights::new(1.5, 0.0).unwrap());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn objective_gradients_through_input_gradients() {
    let err = gradcheck_total(13, DiversityWeights::new(1.0, 2.0).unwrap());
    assert!(err < 1e-3, "{err}");
}
