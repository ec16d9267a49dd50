use super::*;
use crate::boxes::BBox;
use proptest::prelude::*;
use rand::Rng as _;

fn gt(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Annotation {
    Annotation {
        class_id,
        bbox: BBox::new(x0, y0, x1, y1).unwrap(),
    }
}

fn det(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x0, y0, x1, y1).unwrap(),
        class_id,
        score,
    }
}

#[test]
fn ap_fixtures() {
    let g = vec![vec![gt(0, 0.1, 0.1, 0.3, 0.3)]];
    let one = vec![vec![det(0, 0.1, 0.1, 0.3, 0.3, 0.9)]];
    assert_eq!(average_precision(&one, &g, 0, 0.5), Some(1.0));
    assert_eq!(average_precision(&[vec![]], &g, 0, 0.5), Some(0.0));
    assert_eq!(average_precision(&one, &g, 1, 0.5), None);

    // two GTs; ranked TP(0.9), FP(0.8), TP(0.7)
    let g = vec![vec![gt(0, 0.0, 0.0, 0.2, 0.2), gt(0, 0.5, 0.5, 0.7, 0.7)]];
    let d = vec![vec![
        det(0, 0.0, 0.0, 0.2, 0.2, 0.9),
        det(0, 0.8, 0.8, 0.9, 0.9, 0.8),
        det(0, 0.5, 0.5, 0.7, 0.7, 0.7),
    ]];
    assert_eq!(average_precision(&d, &g, 0, 0.5), Some(0.5 * 1.0 + 0.5 * (2.0 / 3.0)));
}

#[test]
fn one_gt_matches_once() {
    let g = [gt(0, 0.1, 0.1, 0.3, 0.3)];
    let d = [det(0, 0.1, 0.1, 0.3, 0.3, 0.5), det(0, 0.11, 0.1, 0.3, 0.3, 0.9)];
    let (tp, unmatched) = match_image(&d.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>(), 0.5);
    assert_eq!(tp, vec![false, true]);
    assert_eq!(unmatched, 0);
}

#[test]
fn perfect_predictions_score_one() {
    let gts = vec![
        vec![gt(0, 0.1, 0.1, 0.3, 0.3), gt(1, 0.5, 0.5, 0.9, 0.7)],
        vec![gt(2, 0.2, 0.6, 0.4, 0.9)],
    ];
    let preds: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|a| Detection { bbox: a.bbox, class_id: a.class_id, score: 0.9 }).collect())
        .collect();
    let s = map_suite(&preds, &gts, 3).unwrap();
    assert_eq!((s.map50, s.map5095, s.ar), (1.0, 1.0, 1.0));
    assert!(s.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0));
    let csv = suite_csv(&s);
    assert!(csv.starts_with(METRICS_HEADER));
    assert!(csv.lines().last().unwrap().starts_with("all,1,1,1,1"));
    assert_eq!(map_suite(&[], &[], 3).unwrap_err().kind(), "contract");
}

fn random_dataset(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let mut rng = rng_from(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..6 {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
            let (w, h) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3));
            let c = rng.random_range(0..2);
            g.push(gt(c, x, y, x + w, y + h));
            if rng.random_bool(0.8) {
                let j = rng.random_range(-0.05..0.05);
                p.push(det(c, (x + j).max(0.0), y, x + w + j, y + h, rng.random_range(0.1..1.0)));
            }
        }
        if rng.random_bool(0.5) {
            p.push(det(rng.random_range(0..2), 0.8, 0.8, 0.95, 0.95, rng.random_range(0.1..1.0)));
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

proptest! {
    #[test]
    fn ap_order_invariant(seed in 0u64..500) {
        let (mut preds, gts) = random_dataset(seed);
        let a = average_precision(&preds, &gts, 0, 0.5);
        for p in &mut preds {
            p.reverse();
        }
        prop_assert_eq!(a, average_precision(&preds, &gts, 0, 0.5));
    }

    #[test]
    fn image_order_and_threshold_monotonicity(seed in 0u64..500) {
        let (preds, gts) = random_dataset(seed);
        let s = map_suite(&preds, &gts, 2).unwrap();
        let (mut rp, mut rg) = (preds.clone(), gts.clone());
        rp.reverse();
        rg.reverse();
        prop_assert_eq!(&s, &map_suite(&rp, &rg, 2).unwrap());
        prop_assert!(s.map5095 <= s.map50 + 1e-12);
        for c in 0..2 {
            let ths = coco_thresholds();
            for w in ths.windows(2) {
                let (a, b) = (average_precision(&preds, &gts, c, w[0]), average_precision(&preds, &gts, c, w[1]));
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!(b <= a + 1e-12);
                }
            }
        }
    }

    #[test]
    fn tp_never_exceeds_gt(seed in 0u64..500) {
        let (preds, gts) = random_dataset(seed);
        for (p, g) in preds.iter().zip(&gts) {
            for c in 0..2 {
                let d: Vec<&Detection> = p.iter().filter(|d| d.class_id == c).collect();
                let gg: Vec<&Annotation> = g.iter().filter(|a| a.class_id == c).collect();
                let (tp, unmatched) = match_image(&d, &gg, 0.5);
                let hits = tp.iter().filter(|t| **t).count();
                prop_assert!(hits <= gg.len());
                prop_assert_eq!(hits + unmatched, gg.len());
            }
        }
    }
}

#[test]
fn stricter_threshold_degrades_perturbed_boxes() {
    let gts = vec![vec![gt(0, 0.2, 0.2, 0.6, 0.6)]; 4];
    let preds: Vec<Vec<Detection>> = (0..4)
        .map(|i| vec![det(0, 0.2 + 0.02 * i as f64, 0.2, 0.6 + 0.02 * i as f64, 0.6, 0.9)])
        .collect();
    let s = map_suite(&preds, &gts, 1).unwrap();
    assert_eq!(s.map50, 1.0);
    assert!(s.map5095 < s.map50);
}

fn gray(size: usize, v: f64) -> Raster {
    Raster::filled(size, size, v)
}

fn textured(seed: u64) -> Raster {
    let mut rng = rng_from(seed);
    Raster::new(32, 32, 1, (0..1024).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
}

#[test]
fn severity_zero_is_identity() {
    let im = textured(1);
    for c in Corruption::ALL {
        assert_eq!(corrupt(&im, CorruptionSpec { category: c, severity: 0 }, 3).unwrap(), im);
    }
    let bad = CorruptionSpec { category: Corruption::Blur, severity: 6 };
    assert_eq!(corrupt(&im, bad, 0).unwrap_err().kind(), "contract");
    assert_eq!("fog".parse::<Corruption>().unwrap_err().kind(), "config");
    assert_eq!("weather".parse::<Corruption>().unwrap(), Corruption::Weather);
}

#[test]
fn noise_std_matches_sigma() {
    let im = gray(128, 0.5);
    for s in 1..=5 {
        let out = corrupt(&im, CorruptionSpec { category: Corruption::Noise, severity: s }, 7).unwrap();
        let d: Vec<f64> = out.data().iter().zip(im.data()).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt();
        let sigma = noise_sigma(s);
        assert!((sd - sigma).abs() < 0.1 * sigma, "severity {s}: {sd} vs {sigma}");
    }
}

#[test]
fn pixelation_is_idempotent() {
    let im = textured(2);
    for s in 1..=5 {
        let spec = CorruptionSpec { category: Corruption::Digital, severity: s };
        let once = corrupt(&im, spec, 0).unwrap();
        assert_eq!(corrupt(&once, spec, 0).unwrap(), once);
    }
}

#[test]
fn corruptions_are_seeded_and_change_the_image() {
    let im = textured(3);
    for c in Corruption::ALL {
        let spec = CorruptionSpec { category: c, severity: 3 };
        let a = corrupt(&im, spec, 11).unwrap();
        assert_eq!(a, corrupt(&im, spec, 11).unwrap());
        assert_ne!(a, im, "{c:?}");
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn few_shot_sizes_and_nesting() {
    assert_eq!(few_shot_indices(200, 0.05, 1).unwrap().len(), 10);
    let mut all = few_shot_indices(30, 1.0, 1).unwrap();
    all.sort();
    assert_eq!(all, (0..30).collect::<Vec<_>>());
    let small = few_shot_indices(200, 0.01, 4).unwrap();
    let big = few_shot_indices(200, 0.05, 4).unwrap();
    assert!(small.iter().all(|i| big.contains(i)));
    assert_eq!(few_shot_indices(10, 0.01, 0).unwrap_err().kind(), "contract");
    assert!(few_shot_indices(10, 0.0, 0).is_err());
}
