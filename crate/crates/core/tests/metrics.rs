use defect_synth::eval::{
    average_precision, best_f1, iou, match_detections, operating_point, pr_curve, BBox, Detection, GroundTruthBox,
    LabeledDetection,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerate every threshold, then integrate the staircase of the best
/// precision reachable at or beyond each recall level.
fn brute_force_ap(dets: &[LabeledDetection], total_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let kept: Vec<_> = dets.iter().filter(|d| d.confidence >= th).collect();
            let tp = kept.iter().filter(|d| d.true_positive).count() as f64;
            (tp / total_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<LabeledDetection>, usize) {
    let total_gt = rng.random_range(1..=5);
    let n = rng.random_range(0..=20);
    let mut tp_left = total_gt;
    let dets = (0..n)
        .map(|_| {
            // A coarse grid of confidences forces ties.
            let confidence = rng.random_range(0..=10) as f64 / 10.0;
            let true_positive = tp_left > 0 && rng.random_bool(0.5);
            tp_left -= true_positive as usize;
            LabeledDetection { confidence, true_positive }
        })
        .collect();
    (dets, total_gt)
}

#[test]
fn average_precision_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let (dets, gt) = random_instance(&mut rng);
        let ap = average_precision(&dets, gt).unwrap();
        let oracle = brute_force_ap(&dets, gt);
        assert!((ap - oracle).abs() <= 1e-9, "case {case}: {ap} vs {oracle} for {dets:?} / {gt}");
    }
}

fn labeled(v: &[(f64, bool)]) -> Vec<LabeledDetection> {
    v.iter()
        .map(|&(confidence, true_positive)| LabeledDetection { confidence, true_positive })
        .collect()
}

#[test]
fn hand_examples() {
    let l = labeled(&[(0.9, true), (0.8, false), (0.7, true)]);
    assert!((average_precision(&l, 2).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    let b = best_f1(&l, 2).unwrap();
    assert!((b.f1 - 0.8).abs() < 1e-12);
    assert_eq!(b.threshold, 0.7);

    let mut v = vec![(0.9, true); 6];
    v.extend([(0.8, false); 2]);
    v.push((0.1, true));
    let op = operating_point(&labeled(&v), 10, 0.4).unwrap();
    assert_eq!((op.precision, op.recall), (0.75, 0.6));
    assert!((op.f1 - 2.0 / 3.0).abs() < 1e-12);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.0f64..30.0, 0.0f64..30.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_labeled() -> impl Strategy<Value = (Vec<LabeledDetection>, usize)> {
    (1usize..=5, prop::collection::vec((0u8..=10, any::<bool>()), 0..20)).prop_map(|(gt, raw)| {
        let mut left = gt;
        let dets = raw
            .into_iter()
            .map(|(c, tp)| {
                let tp = tp && left > 0;
                left -= tp as usize;
                LabeledDetection { confidence: c as f64 / 10.0, true_positive: tp }
            })
            .collect();
        (dets, gt)
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        if a.area() > 0.0 {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn a_confident_hit_never_lowers_ap((dets, gt) in arb_labeled()) {
        let hits = dets.iter().filter(|d| d.true_positive).count();
        prop_assume!(hits < gt);
        let before = average_precision(&dets, gt).unwrap();
        let mut more = dets.clone();
        more.push(LabeledDetection { confidence: 1.0, true_positive: true });
        prop_assert!(average_precision(&more, gt).unwrap() >= before - 1e-12);
    }

    #[test]
    fn a_hopeless_false_alarm_never_raises_precision((dets, gt) in arb_labeled()) {
        let before = pr_curve(&dets, gt).unwrap();
        let mut more = dets.clone();
        more.push(LabeledDetection { confidence: 0.0, true_positive: false });
        let after = pr_curve(&more, gt).unwrap();
        let envelope = |c: &[defect_synth::eval::PrPoint], r: f64| {
            c.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(0.0, f64::max)
        };
        for p in &before {
            prop_assert!(envelope(&after, p.recall) <= envelope(&before, p.recall) + 1e-12);
        }
    }

    #[test]
    fn curve_recall_is_monotone((dets, gt) in arb_labeled()) {
        let c = pr_curve(&dets, gt).unwrap();
        for w in c.windows(2) {
            prop_assert!(w[1].recall >= w[0].recall);
        }
        for p in &c {
            prop_assert!((0.0..=1.0).contains(&p.precision));
        }
    }

    #[test]
    fn lowest_threshold_operating_point_is_the_sweep_end((dets, gt) in arb_labeled()) {
        prop_assume!(!dets.is_empty());
        let c = pr_curve(&dets, gt).unwrap();
        let end = c.last().unwrap();
        let op = operating_point(&dets, gt, -1.0).unwrap();
        prop_assert_eq!((op.precision, op.recall), (end.precision, end.recall));
    }

    #[test]
    fn matching_conserves_counts(
        boxes in prop::collection::vec((arb_box(), 0u8..3), 0..8),
        dets in prop::collection::vec((arb_box(), 0u8..3, 0.0f64..1.0), 0..10),
        threshold in 0.0f64..1.0,
    ) {
        let gts: Vec<_> = boxes.iter().map(|(b, i)| GroundTruthBox { image_id: i.to_string(), bbox: *b }).collect();
        let ds: Vec<_> = dets
            .iter()
            .map(|(b, i, c)| Detection { image_id: i.to_string(), bbox: *b, confidence: *c })
            .collect();
        let m = match_detections(&ds, &gts, threshold);
        let tp = m.labeled.iter().filter(|d| d.true_positive).count();
        prop_assert_eq!(tp + m.false_negatives, gts.len());
        prop_assert_eq!(m.labeled.len(), ds.len());
        for w in m.labeled.windows(2) {
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
    }
}
