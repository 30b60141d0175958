use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalpel_seg::augment::flip_horizontal;
use scalpel_seg::autodiff::{Checkpoint, Graph, Parameter, Tensor};
use scalpel_seg::geometry::{rasterize, Mask, Polygon};
use scalpel_seg::groups::GroupLabel;
use scalpel_seg::metrics::{evaluate, f1, mask_iou, match_instances, ImageEval, ScoredMask, ThresholdStep};
use scalpel_seg::model::{ArchConfig, ModelGraph};
use scalpel_seg::sample::{Image, Instance, Sample};
use scalpel_seg::surgery::{ledger, AblationSpec};
use scalpel_seg::train::early_stop;

const SIDE: usize = 12;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), SIDE * SIDE).prop_map(|d| Mask::from_vec(SIDE, SIDE, d))
}

fn nonempty_mask() -> impl Strategy<Value = Mask> {
    mask_strategy().prop_filter("non-empty", |m| m.count() > 0)
}

fn rect() -> impl Strategy<Value = (u8, u8, u8, u8)> {
    (0u8..20, 0u8..20, 1u8..12, 1u8..12)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in mask_strategy(), b in mask_strategy()) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_of_a_mask_with_itself_is_one(a in nonempty_mask()) {
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1(p, r);
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        prop_assert!(f <= (p + r) / 2.0 + 1e-12);
    }

    #[test]
    fn matching_is_one_to_one_and_consistent(
        gts in prop::collection::vec(mask_strategy(), 0..6),
        preds in prop::collection::vec((0.8f32..1.0, mask_strategy()), 0..6),
        t in 0.3f64..0.9,
    ) {
        let preds: Vec<ScoredMask> = preds.into_iter().map(|(score, mask)| ScoredMask { score, mask }).collect();
        let m = match_instances(&preds, &gts, t, 0.9).unwrap();
        let kept = preds.iter().filter(|p| p.score > 0.9).count();
        prop_assert_eq!(m.tp + m.fp, kept);
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        let mut seen = vec![false; gts.len()];
        for (i, a) in m.assignment.iter().enumerate() {
            if let Some(g) = *a {
                prop_assert!(m.kept[i]);
                prop_assert!(!seen[g]);
                seen[g] = true;
                prop_assert!(mask_iou(&preds[i].mask, &gts[g]).unwrap() >= t);
            }
        }
    }

    #[test]
    fn ground_truth_scores_perfectly_against_itself(gts in prop::collection::vec(nonempty_mask(), 1..6)) {
        let preds = gts.iter().map(|m| ScoredMask { score: 1.0, mask: m.clone() }).collect();
        let r = evaluate(&[ImageEval { gts, preds }], &ThresholdStep::Fine.thresholds(), 0.9).unwrap();
        prop_assert_eq!((r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn swept_metrics_stay_in_unit_interval(
        gts in prop::collection::vec(mask_strategy(), 0..5),
        preds in prop::collection::vec((0.85f32..1.0, mask_strategy()), 0..5),
    ) {
        let preds = preds.into_iter().map(|(score, mask)| ScoredMask { score, mask }).collect();
        let r = evaluate(&[ImageEval { gts, preds }], &ThresholdStep::Coarse.thresholds(), 0.9).unwrap();
        for v in [r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep, r.f1_mean] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for w in r.per_threshold.windows(2) {
            // A stricter threshold never finds more matches.
            prop_assert!(w[1].tp <= w[0].tp);
        }
    }

    /// Stop exactly when the first occurrence of the minimum is at least
    /// `patience` checks old.
    #[test]
    fn early_stop_matches_minimum_position(h in prop::collection::vec(0u8..6, 0..20), patience in 1usize..6) {
        let losses: Vec<f32> = h.iter().map(|&v| f32::from(v)).collect();
        let n = losses.len();
        let expect = n > patience && {
            let prefix = losses[..n - patience].iter().cloned().fold(f32::INFINITY, f32::min);
            let suffix = losses[n - patience..].iter().cloned().fold(f32::INFINITY, f32::min);
            prefix <= suffix
        };
        prop_assert_eq!(early_stop(&losses, patience), expect);
    }

    #[test]
    fn integer_rectangles_rasterize_to_their_area((x, y, w, h) in rect()) {
        let (x0, y0) = (f64::from(x), f64::from(y));
        let (x1, y1) = (x0 + f64::from(w), y0 + f64::from(h));
        let poly = Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]);
        let m = rasterize(&poly, 40, 40);
        prop_assert_eq!(m.count(), usize::from(w) * usize::from(h));
        prop_assert_eq!(poly.area(), f64::from(w) * f64::from(h));
    }

    #[test]
    fn double_flip_is_identity(seed in 0u64..1000, rects in prop::collection::vec(rect(), 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::uniform([3 * 32 * 32], 0.0, 1.0, &mut rng).into_data();
        let instances = rects
            .iter()
            .map(|&(x, y, w, h)| {
                let (x0, y0) = (f64::from(x), f64::from(y));
                let (x1, y1) = (x0 + f64::from(w), y0 + f64::from(h));
                Instance::from_polygons(1, vec![Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])])
            })
            .collect();
        let original = Sample { id: 0, file_name: "s.png".into(), image: Image::from_planar(32, 32, data), instances, stratum: String::new() };
        let mut s = original.clone();
        flip_horizontal(&mut s);
        for (a, b) in s.instances.iter().zip(&original.instances) {
            prop_assert_eq!(a.mask(32, 32).count(), b.mask(32, 32).count());
        }
        flip_horizontal(&mut s);
        prop_assert_eq!(s.image, original.image);
        for (a, b) in s.instances.iter().zip(&original.instances) {
            prop_assert_eq!(a.mask(32, 32), b.mask(32, 32));
            for (u, v) in a.bbox.iter().zip(&b.bbox) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([rows, cols], 3.0, &mut rng));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn checkpoint_bytes_reproduce_the_hash(seed in 0u64..1000, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Parameter> = (0..n)
            .map(|i| Parameter::new(format!("p{i}.weight"), GroupLabel::RoiHeads, Tensor::randn([i + 1, 3], 1.0, &mut rng)))
            .collect();
        let ck = Checkpoint::from_params(&params);
        let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back.content_hash(), ck.content_hash());
        prop_assert!(back.diff(&ck).iter().all(|(_, changed)| *changed == 0));
    }
}

/// The ledger agrees with a direct count over the built model's parameters.
#[test]
fn ledger_counts_the_unfrozen_scalars() {
    let model = ModelGraph::build(&ArchConfig::mini(), 0).unwrap();
    let total: usize = model.params().iter().map(|p| p.tensor.numel()).sum();
    for spec in AblationSpec::ALL {
        let groups = spec.trainable_groups();
        let direct: usize = model.params().iter().filter(|p| groups.contains(&p.group)).map(|p| p.tensor.numel()).sum();
        assert_eq!(ledger(&model, spec), direct, "{spec}");
        assert_eq!(ledger(&ArchConfig::mini(), spec), direct, "{spec}");
        assert!(direct <= total);
    }
    assert_eq!(ledger(&model, AblationSpec::TuneAll), total);
}
