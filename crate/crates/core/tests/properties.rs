use latentproto::dataset::IGNORE;
use latentproto::encoder::FeatureMap;
use latentproto::evaluator::{miou, pool_at_mask_resolution, predict_episode, EncodedImage, IouAccumulator, Rectification};
use latentproto::protomath::{masked_average_pool, masked_average_pool_union, nn_classify, score_map};
use latentproto::rectifier::{fuse_background, rectify_foreground, BankEntry, BankRegion, RegionBank};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

fn vector(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, c)
}

fn feature(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-2.0f64..2.0, c * h * w)
        .prop_map(move |v| FeatureMap::new(Array3::from_shape_vec((c, h, w), v).unwrap(), "f", 1))
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(IGNORE)], h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn bank(c: usize) -> impl Strategy<Value = RegionBank> {
    prop::collection::vec((vector(c), prop::collection::vec(vector(c), 0..3)), 1..7).prop_map(move |es| RegionBank {
        channels: c,
        k: 3,
        entries: es
            .into_iter()
            .enumerate()
            .map(|(i, (emb, regions))| BankEntry {
                id: format!("e{i}"),
                embedding: Array1::from(emb),
                regions: regions
                    .into_iter()
                    .enumerate()
                    .map(|(j, v)| BankRegion {
                        label: j as u8 + 1,
                        vector: Array1::from(v),
                    })
                    .collect(),
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn rectified_prototype_is_a_convex_mix(b in bank(4), s in vector(4), e in vector(4), n in 1usize..6, beta in 0.0f64..=1.0) {
        let s = Array1::from(s);
        let e = Array1::from(e);
        let r = rectify_foreground(s.view(), e.view(), &b, n, beta).unwrap();
        if r.no_regions {
            prop_assert_eq!(r.prototype, s);
        } else {
            prop_assert!((r.mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.mu.iter().all(|&m| m > 0.0));
            prop_assert!(r.selected.len() <= n);
            for ch in 0..4 {
                let vals: Vec<f64> = std::iter::once(s[ch])
                    .chain(r.selected.iter().map(|&(i, k)| b.entries[i].regions[k].vector[ch]))
                    .collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.prototype[ch] >= lo - 1e-9 && r.prototype[ch] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn fusing_a_prototype_with_itself_is_identity(p in vector(5), w in 0.0f64..=1.0) {
        let p = Array1::from(p);
        let f = fuse_background(p.view(), p.view(), w).unwrap();
        for (a, b) in f.iter().zip(&p) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_is_nearest(f in feature(3, 4, 4), a in vector(3), b in vector(3), c in vector(3)) {
        let protos = [Array1::from(a), Array1::from(b), Array1::from(c)];
        let views: Vec<_> = protos.iter().map(|p| p.view()).collect();
        let s = score_map(&f, &views, 20.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let total: f64 = (0..3).map(|k| s.probs[[k, y, x]]).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
        prop_assert_eq!(s.argmax(), nn_classify(&f, &views).unwrap());
    }

    #[test]
    fn union_pool_is_count_weighted(f1 in feature(2, 3, 3), f2 in feature(2, 3, 3), m1 in mask(3, 3), m2 in mask(3, 3)) {
        let n1 = m1.iter().filter(|&&v| v == 1).count() as f64;
        let n2 = m2.iter().filter(|&&v| v == 1).count() as f64;
        prop_assume!(n1 > 0.0 && n2 > 0.0);
        let u = masked_average_pool_union(&[&f1, &f2], &[&m1, &m2], 1).unwrap();
        let a = masked_average_pool(&f1, &m1, 1).unwrap();
        let b = masked_average_pool(&f2, &m2, 1).unwrap();
        let expect = (a * n1 + b * n2) / (n1 + n2);
        for (x, y) in u.iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_ignores_episode_order(eps in prop::collection::vec((0u8..3, mask(4, 4), mask(4, 4)), 1..12)) {
        let mut fwd = IouAccumulator::default();
        for (c, p, g) in &eps {
            fwd.add(*c, &p.mapv(|v| v.min(1)), g).unwrap();
        }
        let mut rev = IouAccumulator::default();
        for (c, p, g) in eps.iter().rev() {
            rev.add(*c, &p.mapv(|v| v.min(1)), g).unwrap();
        }
        // split accumulation merged back
        let mid = eps.len() / 2;
        let mut left = IouAccumulator::default();
        let mut right = IouAccumulator::default();
        for (i, (c, p, g)) in eps.iter().enumerate() {
            let acc = if i < mid { &mut left } else { &mut right };
            acc.add(*c, &p.mapv(|v| v.min(1)), g).unwrap();
        }
        right.merge(&left);
        prop_assert_eq!(&fwd, &rev);
        prop_assert_eq!(&fwd, &right);
        prop_assert_eq!(miou(&fwd, &[0, 1, 2]), miou(&rev, &[0, 1, 2]));
    }

    #[test]
    fn support_order_does_not_matter(f1 in feature(2, 2, 2), f2 in feature(2, 2, 2), m1 in mask(4, 4), m2 in mask(4, 4)) {
        let a = pool_at_mask_resolution(&[(&f1, &m1), (&f2, &m2)], 1);
        let b = pool_at_mask_resolution(&[(&f2, &m2), (&f1, &m1)], 1);
        match (a, b) {
            (Some(a), Some(b)) => for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            },
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn zero_fusion_weight_is_the_baseline(q in feature(3, 2, 2), s in feature(3, 2, 2), m in mask(4, 4), g in vector(3)) {
        prop_assume!(m.iter().any(|&v| v == 1));
        let g = Array1::from(g);
        let se = s.global_average();
        let qe = q.global_average();
        let sup = EncodedImage { feature: &s, embedding: se.view() };
        let qry = EncodedImage { feature: &q, embedding: qe.view() };
        let base = predict_episode(&[(sup, &m)], qry, (4, 4), 20.0, &Rectification::default()).unwrap();
        let rect = Rectification { background: Some((g.view(), 0.0)), foreground: None };
        let off = predict_episode(&[(sup, &m)], qry, (4, 4), 20.0, &rect).unwrap();
        prop_assert_eq!(base, off);
    }
}
