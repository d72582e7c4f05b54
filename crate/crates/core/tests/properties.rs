use ndarray::{Array2, Array3};
use proptest::prelude::*;
use protood_core::bank::{downsample_mask, masked_mean_embedding};
use protood_core::detector::{incs_map, threshold_ood, IncsMap};
use protood_core::extractor::FeatureMap;
use protood_core::matcher::{
    classify_pixels, classify_upsampled, similarity_grid, upsample, HeatmapStack,
};
use protood_core::metrics::{
    binary_iou, confusion_counts, f1, threshold_grid, ScoreSamples, ThresholdCurve,
};
use protood_core::refiner::{refine_ood, vote_mask, Proposal, ProposalSet};
use protood_core::tensor_io::BinaryMask;

fn grid<T: std::fmt::Debug>(
    h: usize,
    w: usize,
    s: impl Strategy<Value = T>,
) -> impl Strategy<Value = Array2<T>> {
    prop::collection::vec(s, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=12, 1usize..=12)
}

fn mask_set(h: usize, w: usize) -> impl Strategy<Value = ProposalSet> {
    prop::collection::vec((grid(h, w, any::<bool>()), 0.0f64..=1.0), 0..5).prop_map(|ps| {
        ProposalSet::new(
            ps.into_iter()
                .filter(|(m, _)| m.iter().any(|&b| b))
                .enumerate()
                .map(|(i, (bits, score))| Proposal {
                    mask: BinaryMask::new(bits),
                    score,
                    source_id: format!("p{i}"),
                })
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn ood_set_shrinks_as_threshold_rises(
        v in dims().prop_flat_map(|(h, w)| grid(h, w, -1.0f32..1.0)),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let w = incs_map(v.view());
        let labels = Array2::zeros(v.dim());
        let a = threshold_ood(&w, &labels, lo).unwrap().ood;
        let b = threshold_ood(&w, &labels, hi).unwrap().ood;
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x || !y));
        prop_assert!(w.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn ood_set_is_affine_invariant(
        v in dims().prop_flat_map(|(h, w)| grid(h, w, (0u8..=20).prop_map(|q| f32::from(q) / 20.0))),
        a in prop::sample::select(vec![0.5f32, 2.0, 4.0]),
        b in prop::sample::select(vec![-1.0f32, 0.0, 0.5]),
        t in 0.0f64..=1.0,
    ) {
        // Dyadic scales and offsets keep the transformed scores exact.
        let labels = Array2::zeros(v.dim());
        let base = threshold_ood(&incs_map(v.view()), &labels, t).unwrap().ood;
        let moved = v.mapv(|x| a * x + b);
        prop_assert_eq!(threshold_ood(&incs_map(moved.view()), &labels, t).unwrap().ood, base);
    }

    #[test]
    fn upsampling_stays_in_range_and_fused_path_agrees(
        k in 1usize..=4, h in 1usize..=5, w in 1usize..=5, sh in 1usize..=4, sw in 1usize..=4,
        seed in prop::collection::vec(-1.0f32..1.0, 100),
    ) {
        let stack = HeatmapStack::new(Array3::from_shape_fn((k, h, w), |(c, y, x)| seed[(c * 25 + y * 5 + x) % 100]));
        let up = upsample(&stack, h * sh, w * sw).unwrap();
        let (lo, hi) = stack.values().iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        prop_assert!(up.values().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        prop_assert_eq!(classify_upsampled(&stack, h * sh, w * sw).unwrap(), classify_pixels(&up).unwrap());
    }

    #[test]
    fn prototype_scale_leaves_similarity_unchanged(
        feats in prop::collection::vec(-1.0f32..1.0, 4 * 3 * 3),
        protos in prop::collection::vec(-1.0f32..1.0, 2 * 4),
        c in prop::sample::select(vec![0.1f32, 10.0]),
    ) {
        let fm = FeatureMap::new(Array3::from_shape_vec((4, 3, 3), feats).unwrap(), 14, "t", "t").unwrap();
        let p = Array2::from_shape_vec((2, 4), protos).unwrap();
        let base = similarity_grid(&fm, p.view()).unwrap();
        let scaled = similarity_grid(&fm, p.mapv(|v| v * c).view()).unwrap();
        prop_assert!(base.iter().zip(&scaled).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn masked_mean_matches_literal_mean(
        feats in prop::collection::vec(-1.0f32..1.0, 5 * 4 * 4),
        bits in grid(4, 4, any::<bool>()),
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let fm = FeatureMap::new(Array3::from_shape_vec((5, 4, 4), feats).unwrap(), 1, "t", "t").unwrap();
        let mask = BinaryMask::new(bits.clone());
        let tm = downsample_mask(&mask, 4, 4, 1).unwrap();
        let got = match masked_mean_embedding(&fm, &tm) {
            Ok(v) => v,
            Err(_) => return Ok(()),
        };
        // Mean of F * M over all 16 positions, then normalized.
        let mut literal = [0.0f64; 5];
        for ((y, x), &b) in bits.indexed_iter() {
            for (d, l) in literal.iter_mut().enumerate() {
                *l += f64::from(fm.values()[[d, y, x]]) * f64::from(u8::from(b)) / 16.0;
            }
        }
        let norm = literal.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (g, l) in got.iter().zip(literal) {
            prop_assert!((f64::from(*g) - l / norm).abs() <= 1e-6);
        }
    }

    #[test]
    fn vote_fraction_matches_count(ood in grid(16, 16, any::<bool>()), bits in grid(16, 16, any::<bool>())) {
        prop_assume!(bits.iter().any(|&b| b));
        let n = bits.iter().filter(|&&b| b).count();
        let hit = bits.iter().zip(&ood).filter(|(&m, &o)| m && o).count();
        let v = vote_mask(&BinaryMask::new(bits), &ood).unwrap();
        prop_assert_eq!(v.ood_fraction, hit as f64 / n as f64);
        prop_assert_eq!(v.is_ood, 2 * hit > n);
    }

    #[test]
    fn refinement_contained_and_monotone(
        (incs, set) in dims().prop_flat_map(|(h, w)| (grid(h, w, 0.0f32..=1.0), mask_set(h, w))),
        d in 0.0f64..=1.0,
    ) {
        let incs = IncsMap::new(incs);
        let labels = Array2::zeros(incs.dims());
        let union = set.iter().filter(|p| p.score >= d).fold(Array2::from_elem(incs.dims(), false), |mut u, p| {
            ndarray::Zip::from(&mut u).and(p.mask.bits()).for_each(|a, &b| *a |= b);
            u
        });
        let mut prev = usize::MAX;
        for i in 0..=10 {
            let decision = threshold_ood(&incs, &labels, f64::from(i) / 10.0).unwrap();
            let r = refine_ood(&decision, &set, d).unwrap();
            prop_assert!(r.ood.iter().zip(&union).all(|(&o, &u)| !o || u));
            let count = r.ood.iter().filter(|&&b| b).count();
            prop_assert!(count <= prev);
            prev = count;
        }
    }

    #[test]
    fn raising_detector_threshold_never_adds_ood(
        (incs, set) in dims().prop_flat_map(|(h, w)| (grid(h, w, 0.0f32..=1.0), mask_set(h, w))),
        d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0, t in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let incs = IncsMap::new(incs);
        let decision = threshold_ood(&incs, &Array2::zeros(incs.dims()), t).unwrap();
        let a = refine_ood(&decision, &set, lo).unwrap().ood;
        let b = refine_ood(&decision, &set, hi).unwrap().ood;
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x || !y));
    }

    #[test]
    fn counts_match_pixel_scan(pred in grid(8, 8, any::<bool>()), gt in grid(8, 8, any::<bool>()), ig in grid(8, 8, any::<bool>())) {
        let c = confusion_counts(&pred, &BinaryMask::new(gt.clone()), Some(&BinaryMask::new(ig.clone()))).unwrap();
        let mut want = [0u64; 4];
        for ((&p, &g), &i) in pred.iter().zip(&gt).zip(&ig) {
            if !i {
                want[usize::from(p) * 2 + usize::from(g)] += 1;
            }
        }
        prop_assert_eq!([c.tn, c.fn_, c.fp, c.tp], want);
    }

    #[test]
    fn dice_iou_identity(pred in grid(6, 6, any::<bool>()), gt in grid(6, 6, any::<bool>())) {
        let iou = binary_iou(&pred, &gt).unwrap();
        let f = f1(&pred, &gt).unwrap();
        prop_assert!((f - 2.0 * iou / (1.0 + iou)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&iou) && (0.0..=1.0).contains(&f));
    }

    #[test]
    fn pooling_order_does_not_matter(
        images in prop::collection::vec(
            (prop::collection::vec(0.0f32..1.0, 0..20), prop::collection::vec(0.0f32..1.0, 0..20)),
            1..5,
        ),
    ) {
        let samples: Vec<ScoreSamples> = images.into_iter().map(|(p, n)| ScoreSamples::new(p, n)).collect();
        let grid = threshold_grid(&samples);
        let forward = ThresholdCurve::from_samples(&samples, &grid);
        let backward = ThresholdCurve::from_samples(samples.iter().rev(), &grid);
        prop_assert_eq!(&forward, &backward);
        for w in forward.points().windows(2) {
            // Thresholds descend, so counts can only grow.
            prop_assert!(w[0].counts.tp <= w[1].counts.tp && w[0].counts.fp <= w[1].counts.fp);
            prop_assert_eq!(w[0].counts.positives(), w[1].counts.positives());
        }
    }
}
