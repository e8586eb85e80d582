//! Property tests for the loss, attention, retrieval and split invariants.

mod common;

use ccreid_core::eval::{cmc, cosine_rank, mean_average_precision, PersonEmbedding};
use ccreid_core::losses::{
    attention_loss, attention_term, cross_entropy_sum, cross_entropy_term, fkp_loss, fkp_term,
    softmax_with_temperature, triplet_term,
};
use ccreid_core::model::{apply_attention, cam_forward, AttentionMap, CamParams, FeatureMap};
use ccreid_core::synth::{Dataset, GenConfig, Protocol, Split};
use ccreid_core::Tensor;
use common::*;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
const SHIFT_TOL: f64 = 1e-9;

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_entries_stay_open_unit(
        f in vec(-1e6f64..1e6, 2 * 3 * 4),
        w in vec(-1e3f64..1e3, 4),
        b in -1e4f64..1e4,
    ) {
        let fm = FeatureMap::from_hwc(2, 3, 4, &f).unwrap();
        let a = cam_forward(&fm, &CamParams { filters: w, bias: b }).unwrap();
        for &v in a.data() {
            prop_assert!(v > 0.0 && v < 1.0, "attention {v}");
        }
    }

    #[test]
    fn attention_matches_loop_oracle(f in vec(-5.0f64..5.0, 3 * 2 * 4), w in vec(-2.0f64..2.0, 4), b in -2.0f64..2.0) {
        let (h, wd, c) = (3, 2, 4);
        let fm = FeatureMap::from_hwc(h, wd, c, &f).unwrap();
        let a = cam_forward(&fm, &CamParams { filters: w.clone(), bias: b }).unwrap();
        let attended = apply_attention(&fm, &a).unwrap();
        for i in 0..h {
            for j in 0..wd {
                let z: f64 = (0..c).map(|k| w[k] * f[(i * wd + j) * c + k]).sum::<f64>() + b;
                let psi = 1.0 / (1.0 + (-z).exp());
                prop_assert!((a.at(i, j) - psi).abs() < 1e-12);
                for k in 0..c {
                    prop_assert_eq!(attended.at(i, j, k), f[(i * wd + j) * c + k] * a.at(i, j));
                }
            }
        }
    }

    #[test]
    fn unit_attention_is_identity(f in vec(-5.0f64..5.0, 2 * 2 * 3)) {
        let fm = FeatureMap::from_hwc(2, 2, 3, &f).unwrap();
        let ones = AttentionMap::new(2, 2, vec![1.0; 4]).unwrap();
        prop_assert_eq!(apply_attention(&fm, &ones).unwrap(), fm);
    }

    #[test]
    fn attention_loss_zero_iff_equal(a in vec(0.0f64..1.0, 1..12), bump in 0usize..12, d in 1e-3f64..0.5) {
        prop_assert_eq!(attention_loss(&a, &a).unwrap(), 0.0);
        let mut t = a.clone();
        let k = bump % a.len();
        t[k] += d;
        prop_assert!(attention_loss(&a, &t).unwrap() > 0.0);
    }

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(z in vec(-50.0f64..50.0, 1..8), k in -100.0f64..100.0, tau in 0.1f64..10.0) {
        let p = softmax_with_temperature(&z, tau).unwrap();
        prop_assert!(p.iter().all(|&v| v > 0.0 || z.len() > 1));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + k).collect();
        let q = softmax_with_temperature(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= SHIFT_TOL);
        }
    }

    #[test]
    fn fkp_zero_and_shift_cases(t in vec(vec(-5.0f64..5.0, 4), 1..5), shifts in vec(-20.0f64..20.0, 5), tau in 0.5f64..10.0) {
        prop_assert_eq!(fkp_loss(&t, &t, tau).unwrap(), 0.0);
        let s: Vec<Vec<f64>> = t.iter().zip(&shifts).map(|(v, k)| v.iter().map(|x| x + k).collect()).collect();
        prop_assert!(fkp_loss(&s, &t, tau).unwrap().abs() <= SHIFT_TOL);
    }

    #[test]
    fn fkp_magnitude_is_temperature_stable(t in vec(-0.5f64..0.5, 5), d in vec(-1e-3f64..1e-3, 5)) {
        prop_assume!(d.iter().any(|v| v.abs() > 1e-5));
        let s: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + b).collect();
        let base = fkp_loss(&[s.clone()], &[t.clone()], 1.0).unwrap();
        prop_assume!(base > 1e-14);
        for tau in [1.0, 2.0, 5.0, 10.0] {
            let v = fkp_loss(&[s.clone()], &[t.clone()], tau).unwrap();
            prop_assert!(v <= 2.0 * base && v >= 0.5 * base, "tau {tau}: {v} vs {base}");
        }
    }

    #[test]
    fn cross_entropy_shift_and_additivity(z in vec(-10.0f64..10.0, 2..6), k in -50.0f64..50.0, label in 0usize..6, members in 1usize..5) {
        let y = label % z.len();
        let one = cross_entropy_sum(&[z.clone()], y).unwrap();
        prop_assert!(one >= 0.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + k).collect();
        prop_assert!((cross_entropy_sum(&[shifted], y).unwrap() - one).abs() <= SHIFT_TOL);
        let group = vec![z.clone(); members];
        prop_assert_eq!(cross_entropy_sum(&group, y).unwrap(), members as f64 * one);
    }

    #[test]
    fn triplet_matches_brute_force(
        seed in any::<u64>(),
        n in 3usize..=8,
        dim in 1usize..4,
        margin in 0.0f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 0;
        labels[2] = 1;
        // integer coordinates make equal distances common
        let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        let t = Tensor::new(vec![n, dim], data).unwrap();
        let got = triplet_term(&[&t], &labels, margin).unwrap().value;
        let want = brute_triplet(&rows_of(&t), &labels, margin);
        prop_assert_eq!(got, want);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn loss_gradients_match_central_differences(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };

        let att = draw(2 * 6, 0.05, 0.95);
        let targets = [draw(6, 0.1, 1.0), draw(6, 0.1, 1.0)];
        let tr: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
        let value = |x: &[f64]| attention_term(&Tensor::new(vec![2, 1, 2, 3], x.to_vec()).unwrap(), &tr).unwrap().value;
        let analytic = attention_term(&Tensor::new(vec![2, 1, 2, 3], att.clone()).unwrap(), &tr).unwrap().grads[0].data().to_vec();
        prop_assert!(relative_error(&analytic, &numeric_grad(&att, FD_STEP, value)) < FD_TOL);

        let student = draw(3 * 4, -2.0, 2.0);
        let teacher = Tensor::new(vec![3, 4], draw(3 * 4, -2.0, 2.0)).unwrap();
        let value = |x: &[f64]| fkp_term(&[&Tensor::new(vec![3, 4], x.to_vec()).unwrap()], &[&teacher], 5.0).unwrap().value;
        let analytic = fkp_term(&[&Tensor::new(vec![3, 4], student.clone()).unwrap()], &[&teacher], 5.0).unwrap().grads[0].data().to_vec();
        prop_assert!(relative_error(&analytic, &numeric_grad(&student, FD_STEP, value)) < FD_TOL);

        let logits = draw(3 * 4, -2.0, 2.0);
        let labels = [0, 3, 1];
        let value = |x: &[f64]| cross_entropy_term(&[&Tensor::new(vec![3, 4], x.to_vec()).unwrap()], &labels).unwrap().value;
        let analytic = cross_entropy_term(&[&Tensor::new(vec![3, 4], logits.clone()).unwrap()], &labels).unwrap().grads[0].data().to_vec();
        prop_assert!(relative_error(&analytic, &numeric_grad(&logits, FD_STEP, value)) < FD_TOL);
    }

    #[test]
    fn cosine_ranking_is_scale_invariant(seed in any::<u64>(), len in 1usize..10, exp in -8i32..8) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (query, gallery, _) = random_instance(&mut rng, len);
        let s = 2f64.powi(exp);
        let scale = |e: &PersonEmbedding, f: f64| PersonEmbedding { vector: e.vector.iter().map(|v| v * f).collect(), ..e.clone() };
        let base = cosine_rank(&query, &gallery).unwrap();
        let scaled: Vec<PersonEmbedding> = gallery.iter().map(|g| scale(g, if rng.random_bool(0.5) { s } else { 1.0 })).collect();
        prop_assert_eq!(cosine_rank(&scale(&query, s), &scaled).unwrap(), base);
    }

    #[test]
    fn ranking_cmc_and_map_match_brute_force(seed in any::<u64>(), queries in 1usize..5, len in 1usize..10, cross in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protocol = if cross { Protocol::CrossClothes } else { Protocol::SameClothes };
        let mut results = Vec::new();
        for _ in 0..queries {
            let (q, g, want) = random_instance(&mut rng, len);
            let got = cosine_rank(&q, &g).unwrap();
            prop_assert_eq!(&got, &want);
            results.push(got);
        }
        let curve = cmc(&results, protocol).unwrap();
        prop_assert_eq!(&curve, &brute_cmc(&results, cross, len));
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
        let m = mean_average_precision(&results, protocol).unwrap();
        prop_assert_eq!(m, brute_map(&results, cross));
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn faceless_queries_use_the_global_reembedding(seed in any::<u64>(), len in 1usize..8) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let global_len = 4;
        let query = embedding(draw(global_len), global_len, false, 0, 0);
        let gallery: Vec<PersonEmbedding> = (0..len)
            .map(|i| {
                let face = i % 3 != 0;
                let n = if face { 2 * global_len } else { global_len };
                embedding(draw(n), global_len, face, i % 2, 1)
            })
            .collect();
        let reembedded: Vec<PersonEmbedding> = gallery.iter().map(|g| g.without_face()).collect();
        prop_assert_eq!(cosine_rank(&query, &gallery).unwrap(), cosine_rank(&query, &reembedded).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn split_invariants_hold(
        seed in 0u64..1000,
        ids in 2usize..7,
        outfits in 2usize..4,
        per in 1usize..4,
        faceless in 0.0f64..0.5,
        cross in any::<bool>(),
    ) {
        prop_assume!(cross || per >= 2);
        let protocol = if cross { Protocol::CrossClothes } else { Protocol::SameClothes };
        let cfg = GenConfig {
            seed,
            num_identities: ids,
            outfits_per_identity: outfits,
            samples_per_outfit: per,
            faceless_fraction: faceless,
            image_dims: [32, 16],
            face_dims: [8, 8],
            protocol,
            ..Default::default()
        };
        prop_assume!(cfg.num_train_identities() >= 1 && cfg.num_train_identities() < ids);
        let ds = Dataset::from_synthetic(&cfg).unwrap();
        let manifest = &ds.manifest;
        prop_assert_eq!(manifest.samples.len(), ids * outfits * per);
        let expected_faceless = (faceless * manifest.samples.len() as f64).round() as usize;
        prop_assert_eq!(manifest.samples.iter().filter(|r| r.face_box.is_none()).count(), expected_faceless);
        for r in &manifest.samples {
            prop_assert_eq!(r.face_box.is_some(), r.face_clean.is_some());
            prop_assert_eq!(r.face_clean.is_some(), r.face_degraded.is_some());
        }
        let of = |split: Split| manifest.samples.iter().filter(move |r| r.split == split);
        let train_ids: std::collections::BTreeSet<usize> = of(Split::Train).map(|r| r.identity_id).collect();
        for q in of(Split::Query) {
            prop_assert!(!train_ids.contains(&q.identity_id));
            let same: Vec<_> = of(Split::Gallery).filter(|g| g.identity_id == q.identity_id).collect();
            prop_assert!(!same.is_empty());
            for g in same {
                prop_assert_eq!(g.clothing_id == q.clothing_id, !cross);
            }
        }
        for g in of(Split::Gallery) {
            prop_assert!(!train_ids.contains(&g.identity_id));
        }
    }
}
