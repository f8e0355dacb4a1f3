use cofipara_core::autograd::{Graph, SoftmaxMask};
use cofipara_core::boxes::{giou, iou, BoundingBox};
use cofipara_core::fusion::{select_queries, FusedFeatures};
use cofipara_core::image_decoder::{combine_image, LossBreakdown};
use cofipara_core::matching::{match_predictions, LossWeights};
use cofipara_core::metrics::{coco_ap, exact_match, token_f1};
use cofipara_core::rationale::{pack_input, RationaleSet, SEPARATOR};
use cofipara_core::reannotate::area_ratio_filter;
use cofipara_core::textnorm::{join_targets, normalize, split_targets};
use cofipara_core::tokenizer::ByteTokenizer;
use cofipara_core::{Matrix, Phase, Raster, Sample};
use proptest::prelude::*;

fn unit_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x1, y1, fw, fh)| {
        let x2 = x1 + (1.0 - x1) * fw;
        let y2 = y1 + (1.0 - y1) * fh;
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn giou_bounds_and_symmetry(a in unit_box(), b in unit_box()) {
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= iou(&a, &b) + 1e-12);
        prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_implies_full_f1(targets in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 0..4)) {
        let pred = join_targets(&targets);
        if exact_match(&pred, &targets) == 1 {
            prop_assert_eq!(token_f1(&pred, &targets), 1.0);
        }
        prop_assert_eq!(exact_match(&pred, &targets), 1);
    }

    #[test]
    fn split_join_round_trip(targets in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 0..4)) {
        let expected: Vec<String> = targets.iter().map(|t| normalize(t)).collect();
        prop_assert_eq!(split_targets(&join_targets(&targets)), expected);
    }

    #[test]
    fn tokenizer_round_trip(s in "[ -~]{0,40}") {
        prop_assume!(!s.contains(SEPARATOR));
        let t = ByteTokenizer;
        prop_assert_eq!(t.decode(&t.encode(&s)), s.clone());
        prop_assert_eq!(t.decode(&t.encode_target(&s)), s);
    }

    #[test]
    fn ap_depends_only_on_ranking(
        gts in prop::collection::vec(prop::collection::vec(unit_box(), 0..3), 1..4),
        preds in prop::collection::vec(prop::collection::vec((unit_box(), 0.01..1.0f64), 0..4), 1..4),
    ) {
        let n = gts.len().min(preds.len());
        let (gts, preds) = (&gts[..n], &preds[..n]);
        let squashed: Vec<Vec<(BoundingBox, f64)>> =
            preds.iter().map(|p| p.iter().map(|(b, c)| (*b, c * c * 0.5)).collect()).collect();
        let a = coco_ap(preds, gts);
        let b = coco_ap(&squashed, gts);
        prop_assert_eq!(a, b);
        prop_assert!(a.ap50 >= a.ap75);
        for v in [a.ap, a.ap50, a.ap75] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn duplicates_never_raise_ap(gt in unit_box(), p in unit_box(), c in 0.1..1.0f64) {
        let single = coco_ap(&[vec![(p, c)]], &[vec![gt]]);
        let doubled = coco_ap(&[vec![(p, c), (p, c)]], &[vec![gt]]);
        prop_assert!(doubled.ap <= single.ap + 1e-12);
        prop_assert!(doubled.ap50 <= single.ap50 + 1e-12);
    }

    #[test]
    fn matching_is_one_to_one(
        gts in prop::collection::vec(unit_box(), 0..4),
        extra in prop::collection::vec((unit_box(), 0.01..1.0f64), 4..7),
    ) {
        let a = match_predictions(&extra, &gts, LossWeights::default()).unwrap();
        prop_assert_eq!(a.pairs.len(), gts.len());
        let mut preds: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        preds.sort_unstable();
        preds.dedup();
        prop_assert_eq!(preds.len(), gts.len());
    }

    #[test]
    fn loss_identity(text in 0.0..10.0f64, l1 in 0.0..1.0f64, g in 0.0..2.0f64, cls in 0.0..5.0f64) {
        let w = LossWeights::default();
        let b = LossBreakdown::combined(text, l1, g, cls, w);
        prop_assert!((b.l_img - (0.2 * l1 + 0.001 * g + 0.1 * cls)).abs() < 1e-12);
        prop_assert!((b.total - (b.l_img + text)).abs() < 1e-12);
        prop_assert_eq!(b.l_img, combine_image(l1, g, cls, w));
        let t = LossBreakdown::text_only(text, w);
        prop_assert_eq!(t.total, text);
    }

    #[test]
    fn query_selection_ignores_positive_rescaling(
        i_b in matrix(9, 3),
        h_t0 in matrix(4, 3),
        k in 1usize..9,
        c in 0.1..10.0f64,
    ) {
        let mask = vec![true, true, false, true];
        let fused = FusedFeatures { h_t0: h_t0.clone(), i_b: i_b.clone(), text_mask: mask.clone() };
        let scaled = FusedFeatures { h_t0: h_t0.map(|v| v * c), i_b, text_mask: mask };
        let mut a = select_queries(&fused, k).unwrap().indices;
        let mut b = select_queries(&scaled, k).unwrap().indices;
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_sum_to_one(m in matrix(3, 5), causal in any::<bool>()) {
        let store = Default::default();
        let mut g = Graph::new(&store);
        let x = g.constant(m);
        let s = g.softmax_rows(x, SoftmaxMask { keys: None, causal });
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn area_filter_is_monotone(boxes in prop::collection::vec(unit_box(), 1..5), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut s = Sample::new("x", "some text", Raster::solid(4, 4, [0; 3]));
        s.visual_targets = boxes;
        let flagged = |t: f64| area_ratio_filter(&s, t).iter().filter(|d| d.flagged).count();
        prop_assert!(flagged(hi) <= flagged(lo));
        for d in area_ratio_filter(&s, lo) {
            prop_assert_eq!(d.flagged, d.area_ratio > lo);
        }
    }

    #[test]
    fn packed_input_separator_counts(text in "[a-z <>]{1,30}", r in "[a-z <>]{1,30}") {
        prop_assume!(!text.trim().is_empty() && !r.trim().is_empty());
        let s = Sample::new("x", &text, Raster::solid(4, 4, [0; 3]));
        let set = RationaleSet { r_pos: r.clone(), r_neg: Some(r), backend_id: "t".into(), prompt_hash: 0 };
        let pre = pack_input(&s, &set, Phase::Pretrain).unwrap();
        let fine = pack_input(&s, &set, Phase::Finetune).unwrap();
        prop_assert_eq!(pre.as_str().matches(SEPARATOR).count(), 2);
        prop_assert_eq!(fine.as_str().matches(SEPARATOR).count(), 1);
    }
}
