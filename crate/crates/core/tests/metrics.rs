use proptest::prelude::*;

use rankdet::geometry::BBox;
use rankdet::metrics::{evaluate, Detection, EvalScene};
use rankdet::scene::GroundTruth;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.2..0.8f64, 0.2..0.8f64, 0.1..0.4f64, 0.1..0.4f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

/// Scenes with one object each and detections jittered around it or placed
/// anywhere; scores are distinct.
fn instance() -> impl Strategy<Value = (Vec<EvalScene>, Vec<Detection>)> {
    prop::collection::vec((bbox(), 0..2usize, prop::collection::vec((bbox(), any::<bool>(), 0..2usize), 0..5)), 1..5)
        .prop_map(|scenes| {
            let mut dets = Vec::new();
            let mut evals = Vec::new();
            for (id, (gt, cat, cands)) in scenes.into_iter().enumerate() {
                let id = id as u64;
                for (b, near, c) in cands {
                    let bbox = if near {
                        BBox::new(gt.cx + (b.cx - 0.5) * 0.1, gt.cy + (b.cy - 0.5) * 0.1, gt.w, gt.h)
                    } else {
                        b
                    };
                    let score = (dets.len() as f64 * 0.618_034).fract() * 0.98 + 0.01;
                    dets.push(Detection {
                        scene_id: id,
                        bbox,
                        category: c,
                        score,
                    });
                }
                evals.push(EvalScene {
                    id,
                    objects: vec![GroundTruth { bbox: gt, category: cat }],
                });
            }
            (evals, dets)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_ignores_monotone_score_transforms((scenes, dets) in instance()) {
        let base = evaluate(&dets, &scenes, 2);
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 0.5, ..*d }).collect();
        let other = evaluate(&squashed, &scenes, 2);
        prop_assert_eq!(base.ap, other.ap);
        prop_assert_eq!(base.ap75, other.ap75);
        prop_assert_eq!(base.ar100, other.ar100);
        prop_assert_eq!(base.olrp, other.olrp);
    }

    #[test]
    fn duplicates_never_raise_ap((scenes, dets) in instance(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!dets.is_empty());
        let base = evaluate(&dets, &scenes, 2);
        let d = dets[pick.index(dets.len())];
        let mut more = dets.clone();
        more.push(Detection { score: d.score - 1e-6, ..d });
        let after = evaluate(&more, &scenes, 2);
        prop_assert!(after.ap <= base.ap + 1e-12, "{} -> {}", base.ap, after.ap);
        prop_assert!(after.ap50 <= base.ap50 + 1e-12);
    }
}
