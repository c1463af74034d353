//! COCO-style box AP averaged over IoU thresholds 0.50 to 0.95.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Dataset, DetectionResultSet};
use crate::{fsutil, Error, Result};

/// Detections kept per image and category, highest scores first.
pub const MAX_DETS: usize = 100;

/// Number of recall points in the interpolated precision curve.
pub const RECALL_POINTS: usize = 101;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub id: u64,
    pub bbox: BBox,
    pub ignore: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetBox {
    /// Position in the caller's detection list.
    pub index: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchRecord {
    pub detection: usize,
    pub score: f64,
    pub matched_gt: Option<u64>,
    pub is_tp: bool,
    /// Matched only an ignore region; excluded from precision and recall.
    pub is_ignored: bool,
}

/// Sorts by score descending, keeping input order among equal scores.
fn rank(dets: &[DetBox]) -> Vec<DetBox> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked
}

/// Greedy matching within one image and category.
///
/// Only the top [`MAX_DETS`] detections take part. Each takes the unmatched
/// regular ground truth with the highest IoU (at least `thresh`), falling back
/// to the best ignore region, which may absorb any number of detections.
pub fn match_category(gts: &[GtBox], dets: &[DetBox], thresh: f64) -> Vec<MatchRecord> {
    let mut ranked = rank(dets);
    ranked.truncate(MAX_DETS);
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let best = |want_ignore: bool, taken: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    if gt.ignore != want_ignore || (!want_ignore && taken[g]) {
                        continue;
                    }
                    let v = iou(&d.bbox, &gt.bbox);
                    if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| g)
            };
            if let Some(g) = best(false, &taken) {
                taken[g] = true;
                MatchRecord {
                    detection: d.index,
                    score: d.score,
                    matched_gt: Some(gts[g].id),
                    is_tp: true,
                    is_ignored: false,
                }
            } else if let Some(g) = best(true, &taken) {
                MatchRecord {
                    detection: d.index,
                    score: d.score,
                    matched_gt: Some(gts[g].id),
                    is_tp: false,
                    is_ignored: true,
                }
            } else {
                MatchRecord {
                    detection: d.index,
                    score: d.score,
                    matched_gt: None,
                    is_tp: false,
                    is_ignored: false,
                }
            }
        })
        .collect()
}

/// 101-point interpolated AP of a ranked TP/FP sequence against `n_gt` positives.
///
/// Returns `None` when there are no positives.
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut hits = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    for (i, &is_tp) in labels.iter().enumerate() {
        tp += usize::from(is_tp);
        hits.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut rank = 0;
    for point in 0..RECALL_POINTS {
        // first rank whose recall hits/n_gt reaches point/100, in integers
        while rank < hits.len() && hits[rank] * 100 < point * n_gt {
            rank += 1;
        }
        if rank == hits.len() {
            break;
        }
        sum += precision[rank];
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: String,
    pub k: u32,
    pub seed: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub dataset_id: String,
    /// Mean over categories with ground truth; `None` if there are none.
    pub ap_5095: Option<f64>,
    /// `None` for categories without regular ground truth boxes.
    pub per_class: BTreeMap<u64, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl APResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("AP results always serialize")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::MalformedFile(format!("AP result: {e}")))
    }
}

pub fn write_ap_result(result: &APResult, path: &std::path::Path) -> Result<()> {
    fsutil::write_atomic(path, result.to_json().as_bytes())
}

pub fn read_ap_result(path: &std::path::Path) -> Result<APResult> {
    APResult::from_json(&fsutil::read_to_string(path)?).map_err(|e| match e {
        Error::MalformedFile(m) => Error::MalformedFile(format!("{}: {m}", path.display())),
        other => other,
    })
}

type ImageInputs = (Vec<GtBox>, Vec<DetBox>);

/// Ground truth and detections of one category, grouped by image (ascending id).
struct CategoryInputs {
    n_gt: usize,
    images: Vec<ImageInputs>,
}

fn gather(dataset: &Dataset, results: &DetectionResultSet) -> BTreeMap<u64, CategoryInputs> {
    let mut per: BTreeMap<u64, BTreeMap<u64, ImageInputs>> = dataset
        .categories()
        .iter()
        .map(|c| (c.id, BTreeMap::new()))
        .collect();
    for a in dataset.annotations() {
        per.entry(a.category_id)
            .or_default()
            .entry(a.image_id)
            .or_default()
            .0
            .push(GtBox {
                id: a.id,
                bbox: a.bbox,
                ignore: a.ignore,
            });
    }
    for (index, d) in results.detections.iter().enumerate() {
        per.entry(d.category_id)
            .or_default()
            .entry(d.image_id)
            .or_default()
            .1
            .push(DetBox {
                index,
                bbox: d.bbox,
                score: d.score,
            });
    }
    per.into_iter()
        .map(|(c, by_image)| {
            let n_gt = by_image
                .values()
                .map(|(g, _)| g.iter().filter(|g| !g.ignore).count())
                .sum();
            (
                c,
                CategoryInputs {
                    n_gt,
                    images: by_image.into_values().collect(),
                },
            )
        })
        .collect()
}

fn category_ap(inputs: &CategoryInputs) -> Option<f64> {
    if inputs.n_gt == 0 {
        return None;
    }
    let thresholds = iou_thresholds();
    let total: f64 = thresholds
        .iter()
        .map(|&t| {
            let mut records: Vec<MatchRecord> = inputs
                .images
                .iter()
                .flat_map(|(g, d)| match_category(g, d, t))
                .collect();
            records.sort_by(|a, b| b.score.total_cmp(&a.score));
            let labels: Vec<bool> = records
                .iter()
                .filter(|r| !r.is_ignored)
                .map(|r| r.is_tp)
                .collect();
            average_precision(&labels, inputs.n_gt).unwrap_or(0.0)
        })
        .sum();
    Some(total / thresholds.len() as f64)
}

/// Evaluates detections, splitting work across categories on the global rayon pool.
pub fn evaluate_dataset(dataset: &Dataset, results: &DetectionResultSet) -> Result<APResult> {
    evaluate_dataset_with(dataset, results, true)
}

pub fn evaluate_dataset_with(
    dataset: &Dataset,
    results: &DetectionResultSet,
    parallel: bool,
) -> Result<APResult> {
    if results.dataset_id != dataset.dataset_id() {
        return Err(Error::InvalidValue(format!(
            "detections belong to {}, not {}",
            results.dataset_id,
            dataset.dataset_id()
        )));
    }
    let inputs: Vec<(u64, CategoryInputs)> = gather(dataset, results).into_iter().collect();
    let per_class: BTreeMap<u64, Option<f64>> = if parallel {
        inputs
            .par_iter()
            .map(|(c, i)| (*c, category_ap(i)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    } else {
        inputs.iter().map(|(c, i)| (*c, category_ap(i))).collect()
    };
    let scored: Vec<f64> = per_class.values().flatten().copied().collect();
    let ap_5095 = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(APResult {
        dataset_id: dataset.dataset_id().to_owned(),
        ap_5095,
        per_class,
        run: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CocoAnnotation, CocoCategory, CocoFile, CocoImage, Detection};
    use proptest::prelude::*;

    fn gt(id: u64, x: f64, y: f64, w: f64, h: f64) -> GtBox {
        GtBox {
            id,
            bbox: BBox::new(x, y, w, h),
            ignore: false,
        }
    }

    fn det(index: usize, x: f64, y: f64, w: f64, h: f64, score: f64) -> DetBox {
        DetBox {
            index,
            bbox: BBox::new(x, y, w, h),
            score,
        }
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 10.0, 10.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 0.0, 0.0), &BBox::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t[5], 0.75);
    }

    #[test]
    fn tp_fp_tp_curve() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - expected).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[true], 0), None);
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[false, false], 1), Some(0.0));
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        // half the positives found: recall points 0..=50 are covered
        assert!((average_precision(&[true], 2).unwrap() - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn recall_grid_uses_exact_fractions() {
        // 7 of 10 found: recall 0.7 must reach point 70 exactly
        let mut labels = vec![true; 7];
        labels.extend([false; 3]);
        let ap = average_precision(&labels, 10).unwrap();
        assert!((ap - 71.0 / 101.0).abs() < 1e-15, "{ap}");
    }

    #[test]
    fn higher_score_claims_the_ground_truth() {
        let gts = [gt(1, 0.0, 0.0, 10.0, 10.0)];
        let dets = [det(0, 0.0, 0.0, 10.0, 10.0, 0.4), det(1, 0.5, 0.0, 10.0, 10.0, 0.9)];
        let m = match_category(&gts, &dets, 0.5);
        assert_eq!(m[0].detection, 1);
        assert!(m[0].is_tp);
        assert!(!m[1].is_tp && !m[1].is_ignored);
    }

    #[test]
    fn equal_scores_keep_input_order() {
        let gts = [gt(1, 0.0, 0.0, 10.0, 10.0)];
        let dets = [det(0, 1.0, 0.0, 10.0, 10.0, 0.5), det(1, 0.0, 0.0, 10.0, 10.0, 0.5)];
        let m = match_category(&gts, &dets, 0.5);
        assert_eq!((m[0].detection, m[0].is_tp), (0, true));
    }

    #[test]
    fn best_iou_wins_and_ties_go_to_first() {
        let gts = [gt(1, 3.0, 0.0, 10.0, 10.0), gt(2, 1.0, 0.0, 10.0, 10.0), gt(3, -1.0, 0.0, 10.0, 10.0)];
        let m = match_category(&gts, &[det(0, 0.0, 0.0, 10.0, 10.0, 1.0)], 0.5);
        assert_eq!(m[0].matched_gt, Some(2));
    }

    #[test]
    fn ignore_regions_absorb_unmatched_detections() {
        let gts = [
            gt(1, 0.0, 0.0, 10.0, 10.0),
            GtBox {
                id: 2,
                bbox: BBox::new(50.0, 50.0, 10.0, 10.0),
                ignore: true,
            },
        ];
        let dets = [
            det(0, 50.0, 50.0, 10.0, 10.0, 0.9),
            det(1, 51.0, 50.0, 10.0, 10.0, 0.8),
            det(2, 0.0, 0.0, 10.0, 10.0, 0.7),
        ];
        let m = match_category(&gts, &dets, 0.5);
        assert!(m[0].is_ignored && m[1].is_ignored);
        assert_eq!(m[0].matched_gt, Some(2));
        assert!(m[2].is_tp);
    }

    #[test]
    fn only_top_detections_count() {
        let gts = [gt(1, 0.0, 0.0, 10.0, 10.0)];
        let mut dets: Vec<DetBox> = (0..MAX_DETS)
            .map(|i| det(i, 100.0, 100.0, 5.0, 5.0, 1.0))
            .collect();
        dets.push(det(MAX_DETS, 0.0, 0.0, 10.0, 10.0, 0.1));
        let m = match_category(&gts, &dets, 0.5);
        assert_eq!(m.len(), MAX_DETS);
        assert!(m.iter().all(|r| !r.is_tp));
    }

    fn toy_dataset() -> Dataset {
        let coco = CocoFile {
            images: (1..=2)
                .map(|id| CocoImage {
                    id,
                    width: 100,
                    height: 100,
                    file_name: format!("{id}.jpg"),
                })
                .collect(),
            annotations: vec![
                CocoAnnotation { id: 1, image_id: 1, category_id: 1, bbox: [0.0, 0.0, 10.0, 10.0], iscrowd: 0 },
                CocoAnnotation { id: 2, image_id: 2, category_id: 1, bbox: [20.0, 20.0, 10.0, 10.0], iscrowd: 0 },
                CocoAnnotation { id: 3, image_id: 2, category_id: 2, bbox: [50.0, 50.0, 20.0, 20.0], iscrowd: 1 },
            ],
            categories: vec![
                CocoCategory { id: 1, name: "cat".into() },
                CocoCategory { id: 2, name: "crowd".into() },
                CocoCategory { id: 3, name: "unused".into() },
            ],
        };
        Dataset::from_coco("toy", coco).unwrap()
    }

    fn d(image_id: u64, category_id: u64, bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            image_id,
            category_id,
            bbox: bbox.into(),
            score,
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let ds = toy_dataset();
        let dets = DetectionResultSet::new(
            &ds,
            vec![d(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9), d(2, 1, [20.0, 20.0, 10.0, 10.0], 0.8)],
        )
        .unwrap();
        let r = evaluate_dataset(&ds, &dets).unwrap();
        assert_eq!(r.ap_5095, Some(1.0));
        assert_eq!(r.per_class[&1], Some(1.0));
        assert_eq!(r.per_class[&2], None);
        assert_eq!(r.per_class[&3], None);
    }

    #[test]
    fn no_detections_score_zero() {
        let ds = toy_dataset();
        let r = evaluate_dataset(&ds, &DetectionResultSet::new(&ds, vec![]).unwrap()).unwrap();
        assert_eq!(r.ap_5095, Some(0.0));
    }

    #[test]
    fn foreign_results_are_rejected() {
        let ds = toy_dataset();
        let mut dets = DetectionResultSet::new(&ds, vec![]).unwrap();
        dets.dataset_id = "elsewhere".into();
        assert!(evaluate_dataset(&ds, &dets).is_err());
    }

    #[test]
    fn result_json_round_trip() {
        let ds = toy_dataset();
        let mut r = evaluate_dataset(&ds, &DetectionResultSet::new(&ds, vec![d(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9)]).unwrap()).unwrap();
        r.run = Some(RunInfo { method: "GLIP".into(), k: 3, seed: 1 });
        let back = APResult::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn turning_a_false_positive_into_a_hit_never_lowers_ap(
            labels in prop::collection::vec(any::<bool>(), 1..40),
            extra in 0usize..5,
            at in any::<prop::sample::Index>(),
        ) {
            let n_gt = labels.iter().filter(|&&l| l).count() + extra + 1;
            let i = at.index(labels.len());
            let mut better = labels.clone();
            better[i] = true;
            let before = average_precision(&labels, n_gt).unwrap();
            let after = average_precision(&better, n_gt).unwrap();
            prop_assert!(after >= before - 1e-12);
            prop_assert!((0.0..=1.0).contains(&before));
        }

        #[test]
        fn stricter_thresholds_never_add_hits(
            gts in prop::collection::vec(arb_box(), 0..6),
            dets in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..10),
        ) {
            let gts: Vec<GtBox> = gts.into_iter().enumerate().map(|(i, b)| GtBox { id: i as u64, bbox: b, ignore: i % 4 == 3 }).collect();
            let dets: Vec<DetBox> = dets.into_iter().enumerate().map(|(i, (b, s))| DetBox { index: i, bbox: b, score: s }).collect();
            let n_gt = gts.iter().filter(|g| !g.ignore).count();
            let mut last_hits = usize::MAX;
            for t in iou_thresholds() {
                let m = match_category(&gts, &dets, t);
                let hits = m.iter().filter(|r| r.is_tp).count();
                prop_assert!(hits <= last_hits);
                last_hits = hits;
                let mut matched: Vec<u64> = m.iter().filter(|r| r.is_tp).filter_map(|r| r.matched_gt).collect();
                matched.sort_unstable();
                let before = matched.len();
                matched.dedup();
                prop_assert_eq!(before, matched.len());
                prop_assert!(hits <= n_gt);
            }
        }
    }
}
