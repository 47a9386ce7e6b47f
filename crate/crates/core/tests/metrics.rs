//! Matching, aggregation and offset-histogram properties.

use proptest::prelude::*;
use wsdet::dataset::Annotation;
use wsdet::metrics::{aggregate, iou, match_frame, offset_histogram, FrameOutcome, MatchCriterion};
use wsdet::postprocess::BoundingBox;

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn any_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0)
        .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
}

/// One frame: ground truth (maybe absent) and a detection (maybe absent).
fn any_frame() -> impl Strategy<Value = (Annotation, bool, Option<BoundingBox>)> {
    (
        any::<bool>(),
        any_box(),
        any::<bool>(),
        any_box(),
        any_box(),
    )
        .prop_map(|(gt_on, g, det_on, d, near)| {
            let gt = if gt_on {
                Annotation::present(g)
            } else {
                Annotation::ABSENT
            };
            // bias half the detections towards the ground truth so TPs occur
            let d = if det_on {
                bx(g.x_min, g.y_min, g.x_max + near.width() * 0.1, g.y_max)
            } else {
                d
            };
            (gt, det_on || gt_on, Some(d))
        })
}

fn outcomes(
    frames: &[(Annotation, bool, Option<BoundingBox>)],
    c: &MatchCriterion,
) -> Vec<FrameOutcome> {
    frames
        .iter()
        .map(|(g, p, d)| match_frame(*p, d.as_ref(), g, c, Some(0.1)).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lowering_the_iou_threshold_never_loses_true_positives(
        frames in proptest::collection::vec(any_frame(), 1..30),
        t1 in 0.05f64..0.95,
        t2 in 0.05f64..0.95,
    ) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let tp = |t| outcomes(&frames, &MatchCriterion::iou(t)).iter().filter(|o| o.tp).count();
        prop_assert!(tp(lo) >= tp(hi));
    }

    #[test]
    fn rates_are_bounded_and_counts_consistent(frames in proptest::collection::vec(any_frame(), 1..30)) {
        let c = MatchCriterion::default();
        let r = aggregate(&outcomes(&frames, &c), &c).unwrap();
        let present = frames.iter().filter(|(g, _, _)| g.present).count();
        prop_assert_eq!(r.tp + r.fn_, present);
        for v in [r.precision, r.recall].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn aggregation_ignores_frame_order(frames in proptest::collection::vec(any_frame(), 1..30), rot in 0usize..30) {
        let c = MatchCriterion::distance(2.5);
        let o = outcomes(&frames, &c);
        let mut p = o.clone();
        p.rotate_left(rot % o.len());
        p.reverse();
        let (a, b) = (aggregate(&o, &c).unwrap(), aggregate(&p, &c).unwrap());
        prop_assert_eq!((a.tp, a.fp, a.fn_, a.precision, a.recall), (b.tp, b.fp, b.fn_, b.precision, b.recall));
    }
}

#[test]
fn six_frame_toy_set_matches_hand_counts() {
    let g = bx(10.0, 10.0, 20.0, 20.0);
    let frames = [
        // exact hit
        (Annotation::present(g), true, Some(g)),
        // IoU 0.4
        (
            Annotation::present(g),
            true,
            Some(bx(10.0, 10.0, 20.0, 14.0)),
        ),
        // missed
        (Annotation::present(g), false, None),
        // detection on an empty frame
        (Annotation::ABSENT, true, Some(g)),
        // correct rejection
        (Annotation::ABSENT, false, None),
        // shifted 1 px, IoU 90 / 110
        (
            Annotation::present(g),
            true,
            Some(bx(11.0, 10.0, 21.0, 20.0)),
        ),
    ];
    let c = MatchCriterion::default();
    let o = outcomes(&frames, &c);
    let labels: Vec<(bool, bool, bool)> = o.iter().map(|f| (f.tp, f.fp, f.fn_)).collect();
    assert_eq!(
        labels,
        [
            (true, false, false),
            (false, true, true),
            (false, false, true),
            (false, true, false),
            (false, false, false),
            (true, false, false),
        ]
    );
    let r = aggregate(&o, &c).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 2));
    assert_eq!((r.precision, r.recall), (Some(0.5), Some(0.5)));
    // offset of the shifted hit: 1 px right at 0.1 mm/px
    assert_eq!(o[5].offset_mm, Some((0.1, 0.0)));
}

#[test]
fn symmetric_offsets_give_symmetric_marginals() {
    let mut offsets = Vec::new();
    for i in 0..40 {
        let v = (i as f64 * 0.37) % 3.0;
        for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            offsets.push((sx * v, sy * 0.5 * v));
        }
    }
    let h = offset_histogram(&offsets, 0.25).unwrap();
    assert_eq!(h.overflow, 0);
    let side = h.side();
    for i in 0..side {
        assert_eq!(h.x_marginal[i], h.x_marginal[side - 1 - i], "x bin {i}");
        assert_eq!(h.y_marginal[i], h.y_marginal[side - 1 - i], "y bin {i}");
    }
    assert_eq!(h.x_marginal.iter().sum::<usize>(), offsets.len());
}
