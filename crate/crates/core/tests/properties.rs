mod common;

use detcurate::anno::{filter_small_boxes, parse_ground_truth};
use detcurate::frechet::{frechet_distance, GaussianStats};
use detcurate::geom::match_image;
use detcurate::layout::{self, LayoutStats, Moments, SampleOptions};
use detcurate::metrics::{average_precision, interpolated_envelope, pr_curve};
use detcurate::optim::{EarlyStopper, Hyper, LeastSquares, OptimizerState};
use detcurate::prfilter::{pr_filter, PrFilterConfig};
use detcurate::{iou, AnnotatedImage, Annotation, BoundingBox, Dataset, Detection};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn arb_box(size: f64) -> impl Strategy<Value = BoundingBox> {
    (0.0..size * 0.8, 0.0..size * 0.8, 1.0..size * 0.5, 1.0..size * 0.5)
        .prop_map(|(x, y, w, h)| bx(x, y, w, h))
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(
        (
            50u32..400,
            50u32..400,
            prop::collection::vec((arb_box(500.0), 1i64..=2), 0..5),
        ),
        1..5,
    )
    .prop_map(|images| {
        let images = images
            .into_iter()
            .enumerate()
            .map(|(i, (w, h, anns))| AnnotatedImage {
                image_id: format!("img{i}"),
                width: w,
                height: h,
                annotations: anns
                    .into_iter()
                    .map(|(bbox, category_id)| Annotation { bbox, category_id })
                    .collect(),
            })
            .collect();
        Dataset::new(categories(&[1, 2]), images).unwrap()
    })
}

/// Maximum number of disjoint (detection, GT) pairs with IoU >= `thr`.
fn max_matching(gts: &[BoundingBox], dets: &[BoundingBox], thr: f64) -> usize {
    fn go(d: usize, used: &mut Vec<bool>, gts: &[BoundingBox], dets: &[BoundingBox], thr: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, used, gts, dets, thr);
        for g in 0..gts.len() {
            if !used[g] && ref_iou(&dets[d], &gts[g]) >= thr {
                used[g] = true;
                best = best.max(1 + go(d + 1, used, gts, dets, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; gts.len()], gts, dets, thr)
}

fn single_class(boxes: &[BoundingBox]) -> Dataset {
    Dataset::new(
        categories(&[1]),
        vec![AnnotatedImage {
            image_id: "a".into(),
            width: 100,
            height: 100,
            annotations: boxes
                .iter()
                .map(|&bbox| Annotation { bbox, category_id: 1 })
                .collect(),
        }],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ground_truth_round_trips(ds in arb_dataset()) {
        let text = ds.to_json_string();
        let once = parse_ground_truth(&text).unwrap().value;
        let twice = parse_ground_truth(&once.to_json_string()).unwrap().value;
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn small_box_filter_is_idempotent(ds in arb_dataset(), frac in 0.0f64..0.05) {
        let (once, _) = filter_small_boxes(&ds, frac).unwrap();
        let (twice, removed) = filter_small_boxes(&once, frac).unwrap();
        prop_assert_eq!(removed, 0);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.images.len(), ds.images.len());
        prop_assert!(once.annotation_count() <= ds.annotation_count());
    }

    #[test]
    fn greedy_matching_against_brute_force(
        gts in prop::collection::vec(arb_box(100.0), 0..=4),
        dets in prop::collection::vec(arb_box(100.0), 0..=4),
    ) {
        let scored: Vec<_> = dets
            .iter()
            .enumerate()
            .map(|(i, &b)| (b, 1.0 - i as f64 * 0.1))
            .collect();
        let greedy = match_image(&gts, &scored, 0.3).tp;
        let best = max_matching(&gts, &dets, 0.3);
        prop_assert!(greedy <= best);
        prop_assert!(best <= 2 * greedy);
        let unambiguous = dets
            .iter()
            .all(|d| gts.iter().filter(|g| iou(d, g) >= 0.3).count() <= 1);
        if unambiguous {
            prop_assert_eq!(greedy, best);
        }
    }

    #[test]
    fn ap_bounds_envelope_and_rescale(
        gts in prop::collection::vec(arb_box(100.0), 1..5),
        dets in prop::collection::vec((arb_box(100.0), 0.01f64..1.0), 0..8),
        scale in 0.05f64..1.0,
    ) {
        let gt = single_class(&gts);
        let make = |s: f64| -> Vec<Detection> {
            dets.iter()
                .map(|&(b, c)| Detection::new("a", 1, b, c * s).unwrap())
                .collect()
        };
        let curve = pr_curve(1, &make(1.0), &gt, 0.5).unwrap();
        let ap = average_precision(&curve);
        prop_assert!((0.0..=1.0).contains(&ap));
        let env = interpolated_envelope(&curve);
        prop_assert!(env.windows(2).all(|w| w[0] >= w[1]));
        let rescaled = average_precision(&pr_curve(1, &make(scale), &gt, 0.5).unwrap());
        prop_assert_eq!(ap, rescaled);
    }

    #[test]
    fn appending_a_sure_false_positive_never_raises_ap(
        gts in prop::collection::vec(arb_box(50.0), 1..5),
        dets in prop::collection::vec((arb_box(50.0), 0.1f64..1.0), 0..8),
    ) {
        let gt = single_class(&gts);
        let mut list: Vec<Detection> = dets
            .iter()
            .map(|&(b, c)| Detection::new("a", 1, b, c).unwrap())
            .collect();
        let before = average_precision(&pr_curve(1, &list, &gt, 0.5).unwrap());
        list.push(Detection::new("a", 1, bx(90.0, 90.0, 5.0, 5.0), 0.05).unwrap());
        let after = average_precision(&pr_curve(1, &list, &gt, 0.5).unwrap());
        prop_assert!(after <= before);
    }

    #[test]
    fn frechet_symmetry_and_translation(
        seed in any::<u64>(),
        d in 1usize..8,
        shift in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |d: usize| {
            let b = DMatrix::from_fn(d, d + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mean = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            GaussianStats { mean, cov: &b * b.transpose(), n: 50 }
        };
        let a = draw(d);
        let b = draw(d);
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() <= 1e-9 * ab.max(1.0));
        let t = DVector::from_column_slice(&shift[..d]);
        let moved = |s: &GaussianStats| GaussianStats { mean: &s.mean + &t, ..s.clone() };
        let shifted = frechet_distance(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((ab - shifted).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn pr_filter_threshold_monotonicity(
        seed in any::<u64>(),
        p in 0.0f64..=1.0, dp in 0.0f64..=1.0,
        r in 0.0f64..=1.0, dr in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gt, dets) = random_instance(&mut rng);
        let kept = |p: f64, r: f64| {
            let cfg = PrFilterConfig { precision_threshold: p, recall_threshold: r, iou_threshold: 0.5 };
            pr_filter(&gt, &dets, &cfg).unwrap().0.images.len()
        };
        let (p2, r2) = ((p + dp).min(1.0), (r + dr).min(1.0));
        prop_assert!(kept(p2, r) <= kept(p, r));
        prop_assert!(kept(p, r2) <= kept(p, r));
    }

    #[test]
    fn plain_steps_equal_gradient_descent(
        theta0 in prop::collection::vec(-3.0f64..3.0, 1..6),
        gamma in 0.001f64..0.5,
        steps in 1usize..20,
    ) {
        let p = theta0.len();
        let ls = LeastSquares {
            a: DMatrix::from_fn(p + 1, p, |i, j| if i == j { 1.0 } else { 0.1 * (i + j) as f64 }),
            y: DVector::from_element(p + 1, 1.0),
        };
        let mut s = OptimizerState::new(
            theta0.clone(),
            Hyper { momentum: 0.0, weight_decay: 0.0, learning_rate: gamma },
        )
        .unwrap();
        let mut theta = theta0;
        for _ in 0..steps {
            s.step(&ls.gradient(s.theta())).unwrap();
            let g = ls.gradient(&theta);
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= gamma * (0.0 * 0.0 + gi + 0.0 * *t);
            }
        }
        let same = s.theta().iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn convex_quadratic_converges_monotonically(seed in any::<u64>(), p in 1usize..6) {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(p + 3, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ls = LeastSquares { a, y: DVector::from_fn(p + 3, |_, _| rng.sample::<f64, _>(StandardNormal)) };
        let Some(star) = ls.minimizer() else { return Ok(()) };
        let h = ls.a.transpose() * &ls.a;
        let eig = h.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        prop_assume!(lo > 1e-3 * hi);
        let mut s = OptimizerState::new(
            vec![0.0; p],
            Hyper { momentum: 0.0, weight_decay: 0.0, learning_rate: 1.0 / hi },
        )
        .unwrap();
        let dist = |t: &[f64]| t.iter().zip(&star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut prev = f64::INFINITY;
        for k in 0..200 {
            s.step(&ls.gradient(s.theta())).unwrap();
            let d = dist(s.theta());
            if k >= 5 && d > 1e-12 {
                prop_assert!(d <= prev + 1e-15, "step {}: {} > {}", k, d, prev);
            }
            prev = d;
        }
    }

    #[test]
    fn early_stopper_keeps_the_minimum(losses in prop::collection::vec(0.0f64..10.0, 1..60)) {
        let mut es = EarlyStopper::<usize>::default();
        let mut seen = Vec::new();
        for (i, &l) in losses.iter().enumerate() {
            seen.push(l);
            if es.update(i + 1, l, &i) == detcurate::optim::StopVerdict::Stop {
                break;
            }
        }
        let best = es.best().unwrap();
        let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(best.loss, min);
        prop_assert_eq!(seen[best.weights], min);
    }

    #[test]
    fn layout_sampling_is_deterministic_and_bounded(seed in any::<u64>(), n in 1usize..30) {
        let stats = LayoutStats {
            count: Moments { mean: 4.0, variance: 9.0 },
            center_x: Moments { mean: 0.5, variance: 0.2 },
            center_y: Moments { mean: 0.5, variance: 0.2 },
            width: Moments { mean: 0.05, variance: 0.01 },
            height: Moments { mean: 0.05, variance: 0.01 },
        };
        let opts = SampleOptions::default();
        let a = layout::sample_layout(&stats, seed, n, "car", "{n} cars", &opts).unwrap();
        let b = layout::sample_layout(&stats, seed, n, "car", "{n} cars", &opts).unwrap();
        prop_assert_eq!(
            layout::instructions_to_json_string(&a),
            layout::instructions_to_json_string(&b)
        );
        for ins in &a {
            prop_assert!((1..=30).contains(&ins.entities.len()));
            for e in &ins.entities {
                let [x1, y1, x2, y2] = e.bbox.corners();
                prop_assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
                prop_assert!(e.bbox.w() >= 0.01 && e.bbox.h() >= 0.01);
            }
        }
    }
}

#[test]
fn greedy_can_miss_the_maximum_matching() {
    // A overlaps both GTs and prefers G1; B only reaches G1. All IoUs are
    // distinct, yet greedy matches one pair where two are possible.
    let g1 = bx(0.0, 0.0, 10.0, 10.0);
    let g2 = bx(2.0, 0.0, 10.0, 10.0);
    let a = bx(0.8, 0.0, 10.0, 10.0);
    let b = bx(-1.5, 0.0, 10.0, 10.0);
    assert!(iou(&a, &g1) > iou(&a, &g2) && iou(&a, &g2) >= 0.5);
    assert!(iou(&b, &g1) >= 0.5 && iou(&b, &g2) < 0.5);
    let m = match_image(&[g1, g2], &[(a, 0.9), (b, 0.8)], 0.5);
    assert_eq!(m.tp, 1);
    assert_eq!(max_matching(&[g1, g2], &[a, b], 0.5), 2);
}
