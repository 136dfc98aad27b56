//! Single-class detection metrics: greedy matching, all-point average
//! precision, and the P/R/F1 operating point.
//!
//! Matching is per image: predictions are visited in canonical order
//! (score descending, then coordinates ascending, so the result does not
//! depend on input list order) and each takes the unmatched ground truth
//! with the highest IoU at or above the threshold. The precision-recall
//! curve has one point per distinct score threshold — all predictions
//! sharing a score enter together — which makes the result invariant to
//! image permutation and same-score reordering.

use serde::Serialize;

use crate::det::boxes::DetectionBox;
use crate::error::{Error, Result};
use crate::sim::GtBox;

/// One scored prediction's matching outcome.
#[derive(Debug, Clone, Serialize)]
pub struct MatchRecord {
    pub image: usize,
    pub score: f64,
    pub matched: bool,
    /// IoU with the matched ground truth (0 for false positives).
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub matches: Vec<MatchRecord>,
}

pub fn pred_gt_iou(p: &DetectionBox, g: &GtBox) -> Result<f64> {
    p.validate()?;
    if !(g.x1 < g.x2 && g.y1 < g.y2) {
        return Err(Error::Value(format!("degenerate ground truth {g:?}")));
    }
    let ix = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
    let iy = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
    let inter = ix * iy;
    let union = p.area() + g.width() * g.height() - inter;
    Ok(inter / union)
}

/// Evaluate predictions against ground truth at the given IoU threshold
/// (matches require IoU >= threshold).
pub fn evaluate_map(
    preds: &[Vec<DetectionBox>],
    gts: &[Vec<GtBox>],
    iou_thr: f64,
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} prediction lists vs {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    let mut matches: Vec<MatchRecord> = Vec::new();
    for (image, (ps, gs)) in preds.iter().zip(gts).enumerate() {
        let mut order: Vec<usize> = (0..ps.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&ps[a], &ps[b]);
            pb.score
                .partial_cmp(&pa.score)
                .unwrap()
                .then(pa.x1.partial_cmp(&pb.x1).unwrap())
                .then(pa.y1.partial_cmp(&pb.y1).unwrap())
                .then(pa.x2.partial_cmp(&pb.x2).unwrap())
                .then(pa.y2.partial_cmp(&pb.y2).unwrap())
        });
        let mut taken = vec![false; gs.len()];
        for &pi in &order {
            let p = &ps[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gs.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = pred_gt_iou(p, g)?;
                if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) => {
                    taken[gi] = true;
                    matches.push(MatchRecord {
                        image,
                        score: p.score,
                        matched: true,
                        iou: v,
                    });
                }
                None => matches.push(MatchRecord {
                    image,
                    score: p.score,
                    matched: false,
                    iou: 0.0,
                }),
            }
        }
    }

    // One PR point per distinct score threshold, descending.
    let mut by_score: Vec<(f64, bool)> = matches.iter().map(|m| (m.score, m.matched)).collect();
    by_score.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < by_score.len() {
        let score = by_score[i].0;
        while i < by_score.len() && by_score[i].0 == score {
            if by_score[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if total_gt > 0 {
            points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // All-point AP: integrate the right-to-left precision envelope.
    let mut env_at: Vec<f64> = vec![0.0; points.len()];
    let mut run: f64 = 0.0;
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        run = run.max(p);
        env_at[k] = run;
    }
    let mut map50 = 0.0;
    let mut prev_r = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        map50 += (r - prev_r) * env_at[k];
        prev_r = r;
    }

    let total_pred = tp + fp;
    let precision = if total_pred > 0 {
        tp as f64 / total_pred as f64
    } else {
        0.0
    };
    let recall = if total_gt > 0 {
        tp as f64 / total_gt as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalResult {
        precision,
        recall,
        f1,
        map50,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> DetectionBox {
        DetectionBox {
            x1,
            y1,
            x2,
            y2,
            score,
            class: 0,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GtBox {
        GtBox { x1, y1, x2, y2 }
    }

    #[test]
    fn single_correct_prediction_is_perfect() {
        let preds = vec![vec![pred(0.0, 0.0, 10.0, 10.0, 0.8)]];
        let gts = vec![vec![gt(0.5, 0.0, 10.0, 10.0)]]; // IoU 0.95
        let r = evaluate_map(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn no_predictions_is_zero() {
        let preds = vec![vec![]];
        let gts = vec![vec![gt(0.0, 0.0, 5.0, 5.0)]];
        let r = evaluate_map(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.map50, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn tp_then_fp_keeps_full_ap_but_halves_precision() {
        let preds = vec![vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(50.0, 50.0, 60.0, 60.0, 0.8),
        ]];
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let r = evaluate_map(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn each_ground_truth_matches_at_most_once() {
        // Two predictions over one GT: second becomes a false positive.
        let preds = vec![vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(0.0, 0.0, 10.0, 10.0, 0.7),
        ]];
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0)]];
        let r = evaluate_map(&preds, &gts, 0.5).unwrap();
        let tp_count = r.matches.iter().filter(|m| m.matched).count();
        assert_eq!(tp_count, 1);
        assert_eq!(r.precision, 0.5);
    }

    #[test]
    fn image_permutation_leaves_result_unchanged() {
        let preds = vec![
            vec![pred(0.0, 0.0, 10.0, 10.0, 0.6)],
            vec![pred(30.0, 30.0, 42.0, 40.0, 0.6)],
        ];
        let gts = vec![
            vec![gt(0.0, 0.0, 10.0, 10.0)],
            vec![gt(5.0, 5.0, 15.0, 15.0)],
        ];
        let a = evaluate_map(&preds, &gts, 0.5).unwrap();
        let preds_rev: Vec<_> = preds.iter().rev().cloned().collect();
        let gts_rev: Vec<_> = gts.iter().rev().cloned().collect();
        let b = evaluate_map(&preds_rev, &gts_rev, 0.5).unwrap();
        assert_eq!(a.map50, b.map50);
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.recall, b.recall);
    }

    #[test]
    fn same_score_reordering_leaves_result_unchanged() {
        let a_list = vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.5),
            pred(2.0, 0.0, 12.0, 10.0, 0.5),
            pred(40.0, 40.0, 50.0, 50.0, 0.5),
        ];
        let mut b_list = a_list.clone();
        b_list.reverse();
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(3.0, 0.0, 13.0, 10.0)]];
        let a = evaluate_map(&[a_list], &gts, 0.5).unwrap();
        let b = evaluate_map(&[b_list], &gts, 0.5).unwrap();
        assert_eq!(a.map50, b.map50);
        assert_eq!(a.precision, b.precision);
    }

    #[test]
    fn trailing_false_positive_never_raises_ap() {
        let preds = vec![vec![pred(0.0, 0.0, 10.0, 10.0, 0.9)]];
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)]];
        let base = evaluate_map(&preds, &gts, 0.5).unwrap();
        let mut with_fp = preds.clone();
        with_fp[0].push(pred(70.0, 70.0, 80.0, 80.0, 0.1));
        let worse = evaluate_map(&with_fp, &gts, 0.5).unwrap();
        assert!(worse.map50 <= base.map50);
    }

    #[test]
    fn extra_true_positive_never_lowers_recall() {
        let preds = vec![vec![pred(0.0, 0.0, 10.0, 10.0, 0.9)]];
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)]];
        let base = evaluate_map(&preds, &gts, 0.5).unwrap();
        let mut more = preds.clone();
        more[0].push(pred(20.0, 20.0, 30.0, 30.0, 0.2));
        let better = evaluate_map(&more, &gts, 0.5).unwrap();
        assert!(better.recall >= base.recall);
        assert!(better.map50 >= base.map50);
    }

    #[test]
    fn ap_stays_in_unit_interval() {
        let preds = vec![vec![
            pred(0.0, 0.0, 10.0, 10.0, 0.9),
            pred(50.0, 0.0, 60.0, 10.0, 0.8),
            pred(20.0, 20.0, 30.0, 30.0, 0.7),
        ]];
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 20.0, 30.0, 30.0)]];
        let r = evaluate_map(&preds, &gts, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&r.map50));
        assert!((r.map50 - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_are_dimension_errors() {
        assert!(matches!(
            evaluate_map(&[vec![]], &[], 0.5),
            Err(Error::Dimension(_))
        ));
    }
}
