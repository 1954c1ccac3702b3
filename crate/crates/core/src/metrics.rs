//! Classification and detection metrics: top-k accuracy, confusion matrix,
//! IoU, per-class average precision (all-point interpolation) and mAP.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, BoxAnnotation, Detection};
use crate::error::{Error, Result};

/// Index of the largest score; the lower index wins ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose label is among the `k` highest scores. A class
/// outranks the label if it scores higher, or equal with a lower index.
pub fn topk_accuracy(scores: &[Vec<f32>], labels: &[usize], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} score vectors for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let mut hits = 0usize;
    for (s, &y) in scores.iter().zip(labels) {
        if y >= s.len() {
            return Err(Error::Input(format!("label {y} outside {} classes", s.len())));
        }
        let rank = s
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > s[y] || (v == s[y] && c < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[label][prediction]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Input(format!("class id outside 0..{num_classes}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Intersection over union of two boxes; zero when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn same_frame(d: &Detection, g: &BoxAnnotation) -> bool {
    d.video_id == g.video_id && (d.keyframe_time - g.keyframe_time).abs() < 1e-9
}

/// True/false-positive flags of `dets` in descending score order for
/// `class_id`. Each detection takes the highest-IoU still-unmatched ground
/// truth of the same frame, if that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BoxAnnotation], class_id: usize, iou_thresh: f64) -> Vec<bool> {
    let relevant: Vec<&BoxAnnotation> = gts.iter().filter(|g| g.class_ids.contains(&class_id)).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| dets[b].scores[class_id].total_cmp(&dets[a].scores[class_id]));
    let mut taken = vec![false; relevant.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in relevant.iter().enumerate() {
                if taken[j] || !same_frame(d, g) {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision envelope of ranked hits, with `n_pos` positives.
pub fn ap_from_hits(hits: &[bool], n_pos: usize) -> f64 {
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_pos as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.into_iter().zip(rec) {
        ap += (r - last_r) * p;
        last_r = r;
    }
    ap
}

/// Per-class AP, or `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[BoxAnnotation], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let n_pos = gts.iter().filter(|g| g.class_ids.contains(&class_id)).count();
    if n_pos == 0 {
        return None;
    }
    Some(ap_from_hits(&match_detections(dets, gts, class_id, iou_thresh), n_pos))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
    /// Classes left out of the mean for lack of ground truth.
    pub excluded: Vec<usize>,
}

pub fn mean_ap(dets: &[Detection], gts: &[BoxAnnotation], num_classes: usize, iou_thresh: f64) -> ApSummary {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(dets, gts, c, iou_thresh))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let excluded: Vec<usize> = (0..num_classes).filter(|&c| per_class[c].is_none()).collect();
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have no ground truth and are excluded from mAP");
    }
    ApSummary {
        map: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        per_class,
        excluded,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
}

impl MetricsReport {
    /// Accuracy and confusion from per-sample scores.
    pub fn classification(scores: &[Vec<f32>], labels: &[usize], num_classes: usize) -> Result<Self> {
        let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        Ok(Self {
            top1: Some(topk_accuracy(scores, labels, 1)?),
            top5: Some(topk_accuracy(scores, labels, 5)?),
            confusion: confusion_matrix(&preds, labels, num_classes)?,
            ..Self::default()
        })
    }

    pub fn detection(summary: &ApSummary) -> Self {
        Self {
            per_class_ap: summary.per_class.clone(),
            map: summary.map,
            ..Self::default()
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Rows are true labels, columns predictions.
    pub fn write_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.confusion.len();
        let mut header = vec!["label".to_string()];
        header.extend((0..n).map(|c| format!("pred_{c}")));
        w.write_record(&header)?;
        for (y, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![y.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per class; undefined AP is an empty field.
    pub fn write_ap_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "class,ap")?;
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => writeln!(f, "{c},{v}")?,
                None => writeln!(f, "{c},")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(b: BBox, classes: &[usize]) -> BoxAnnotation {
        BoxAnnotation {
            video_id: "v".into(),
            bbox: b,
            class_ids: classes.to_vec(),
            keyframe_time: 0.0,
        }
    }

    fn det(b: BBox, scores: &[f32]) -> Detection {
        Detection {
            video_id: "v".into(),
            bbox: b,
            scores: scores.to_vec(),
            keyframe_time: 0.0,
        }
    }

    #[test]
    fn topk_cases() {
        let scores = vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.3, 0.2], vec![0.3, 0.3, 0.4]];
        let labels = [1, 2, 1];
        // sample 0: rank 0; sample 1: rank 2; sample 2: 0.3 tie with class 0 (lower index) and 0.4 above -> rank 2
        assert_eq!(topk_accuracy(&scores, &labels, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(topk_accuracy(&scores, &labels, 2).unwrap(), 1.0 / 3.0);
        assert_eq!(topk_accuracy(&scores, &labels, 3).unwrap(), 1.0);
        let onehot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(topk_accuracy(&onehot, &[0, 1], 1).unwrap(), 1.0);
    }

    #[test]
    fn confusion_cases() {
        let m = confusion_matrix(&[1], &[2], 3).unwrap();
        assert_eq!(m, vec![vec![0, 0, 0], vec![0, 0, 0], vec![0, 1, 0]]);
        let d = confusion_matrix(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(d, vec![vec![1, 0], vec![0, 2]]);
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
        // unit squares offset by half a side: 0.5 / 1.5
        let u = bx(0.0, 0.0, 0.4, 0.4);
        let v = bx(0.2, 0.0, 0.6, 0.4);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Two ground truths; detections ranked hit, miss, hit.
    fn three_two_case() -> (Vec<Detection>, Vec<BoxAnnotation>) {
        let gts = vec![gt(bx(0.0, 0.0, 0.4, 0.4), &[0]), gt(bx(0.5, 0.5, 0.9, 0.9), &[0])];
        let dets = vec![
            det(bx(0.5, 0.5, 0.9, 0.85), &[0.7]),
            det(bx(0.0, 0.0, 0.4, 0.38), &[0.9]),
            det(bx(0.0, 0.6, 0.3, 0.9), &[0.8]),
        ];
        (dets, gts)
    }

    #[test]
    fn three_detections_two_truths() {
        let (dets, gts) = three_two_case();
        assert_eq!(match_detections(&dets, &gts, 0, 0.5), vec![true, false, true]);
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> 1/2 * 1 + 1/2 * 2/3
        let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_trivial_cases() {
        let g = vec![gt(bx(0.1, 0.1, 0.3, 0.3), &[0])];
        assert_eq!(
            average_precision(&[det(bx(0.1, 0.1, 0.3, 0.3), &[0.4])], &g, 0, 0.5),
            Some(1.0)
        );
        assert_eq!(
            average_precision(&[det(bx(0.6, 0.6, 0.9, 0.9), &[0.9])], &g, 0, 0.5),
            Some(0.0)
        );
        assert_eq!(average_precision(&[], &g, 1, 0.5), None);
        let s = mean_ap(&[det(bx(0.1, 0.1, 0.3, 0.3), &[0.4, 0.1])], &g, 2, 0.5);
        assert_eq!(s.map, Some(1.0));
        assert_eq!(s.excluded, vec![1]);
    }

    #[test]
    fn other_frames_never_match() {
        let g = vec![gt(bx(0.1, 0.1, 0.3, 0.3), &[0])];
        let mut d = det(bx(0.1, 0.1, 0.3, 0.3), &[0.9]);
        d.video_id = "w".into();
        assert_eq!(average_precision(&[d], &g, 0, 0.5), Some(0.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0.05..0.2f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn topk_monotone(scores in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 5), 1..12), seed in 0usize..5) {
            let labels: Vec<usize> = (0..scores.len()).map(|i| (i + seed) % 5).collect();
            let mut last = 0.0;
            for k in 1..=5 {
                let a = topk_accuracy(&scores, &labels, k).unwrap();
                prop_assert!(a >= last);
                last = a;
            }
            prop_assert_eq!(last, 1.0);
        }

        #[test]
        fn ap_depends_only_on_ranking(
            gts in prop::collection::vec(arb_box(), 1..4),
            dets in prop::collection::vec((arb_box(), 0.01f32..1.0), 1..8),
        ) {
            let gts: Vec<_> = gts.into_iter().map(|b| gt(b, &[0])).collect();
            let d1: Vec<_> = dets.iter().map(|(b, s)| det(*b, &[*s])).collect();
            let d2: Vec<_> = dets.iter().map(|(b, s)| det(*b, &[(3.0 * s).exp() - 7.0])).collect();
            prop_assert_eq!(average_precision(&d1, &gts, 0, 0.5), average_precision(&d2, &gts, 0, 0.5));
        }

        #[test]
        fn inserting_a_top_miss_never_helps(
            gts in prop::collection::vec(arb_box(), 1..4),
            dets in prop::collection::vec((arb_box(), 0.01f32..1.0), 0..6),
        ) {
            let gts: Vec<_> = gts.into_iter().map(|b| gt(b, &[0])).collect();
            let mut d: Vec<_> = dets.iter().map(|(b, s)| det(*b, &[*s])).collect();
            let before = average_precision(&d, &gts, 0, 0.5).unwrap();
            let mut miss = det(bx(0.0, 0.0, 0.01, 0.01), &[2.0]);
            miss.video_id = "elsewhere".into();
            d.push(miss);
            prop_assert!(average_precision(&d, &gts, 0, 0.5).unwrap() <= before + 1e-12);
        }
    }
}
