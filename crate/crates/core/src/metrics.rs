//! Segmentation quality: per-sample IoU, dataset aggregates (overall / mean
//! IoU, precision at overlap thresholds, mAP over .50:.05:.95) and per-pixel
//! class accuracies for label-pair segmentation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::tensor::Mask;

/// Thresholds reported individually, in hundredths.
pub const REPORTED_THRESHOLDS: [u32; 5] = [50, 60, 70, 80, 90];
/// Thresholds averaged into mAP, in hundredths.
pub const MAP_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Intersection and union pixel counts.
pub fn overlap(pred: &Mask, gt: &Mask) -> Result<(usize, usize)> {
    if !pred.same_shape(gt) {
        return Err(input_err!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// IoU strictly above `hundredths / 100`, decided in exact integer arithmetic.
fn exceeds(inter: usize, union: usize, hundredths: u32) -> bool {
    if union == 0 {
        return 100 > hundredths;
    }
    (inter as u128) * 100 > (hundredths as u128) * (union as u128)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub p_50: f64,
    pub p_60: f64,
    pub p_70: f64,
    pub p_80: f64,
    pub p_90: f64,
    pub map_50_95: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Precision at one of the reported thresholds (0.5 .. 0.9).
    pub fn precision_at(&self, tau: f64) -> Option<f64> {
        let k = (tau * 100.0).round() as u32;
        match k {
            50 => Some(self.p_50),
            60 => Some(self.p_60),
            70 => Some(self.p_70),
            80 => Some(self.p_80),
            90 => Some(self.p_90),
            _ => None,
        }
    }

    pub fn to_table(&self) -> String {
        let cols = [
            ("P@0.5", self.p_50),
            ("P@0.6", self.p_60),
            ("P@0.7", self.p_70),
            ("P@0.8", self.p_80),
            ("P@0.9", self.p_90),
            ("mAP", self.map_50_95),
            ("Overall", self.overall_iou),
            ("Mean", self.mean_iou),
        ];
        let mut head = String::new();
        let mut row = String::new();
        for (name, v) in cols {
            let _ = write!(head, "{name:>9}");
            let _ = write!(row, "{:>9.1}", v * 100.0);
        }
        format!("{head}\n{row}\n")
    }
}

/// Aggregates `(prediction, ground truth)` pairs.
pub fn aggregate(samples: &[(Mask, Mask)]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(input_err!("cannot aggregate an empty sample list"));
    }
    let counts = samples
        .iter()
        .map(|(p, g)| overlap(p, g))
        .collect::<Result<Vec<_>>>()?;
    let n = counts.len() as f64;
    let (si, su) = counts
        .iter()
        .fold((0usize, 0usize), |(a, b), &(i, u)| (a + i, b + u));
    let overall_iou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    let mean_iou = counts
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum::<f64>()
        / n;
    let precision = |k: u32| counts.iter().filter(|&&(i, u)| exceeds(i, u, k)).count() as f64 / n;
    let map_50_95 =
        MAP_THRESHOLDS.iter().map(|&k| precision(k)).sum::<f64>() / MAP_THRESHOLDS.len() as f64;
    Ok(EvalReport {
        overall_iou,
        mean_iou,
        p_50: precision(50),
        p_60: precision(60),
        p_70: precision(70),
        p_80: precision(80),
        p_90: precision(90),
        map_50_95,
        samples: samples.len(),
    })
}

/// Per-pixel class labels; `None` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Option<usize>>,
}

impl LabelMap {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![None; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        self.data[i * self.width + j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvalReport {
    pub class_average_acc: f64,
    pub global_acc: f64,
    pub mean_class_iou: f64,
}

/// Pixel accuracies over ground-truth foreground pixels, and per-class IoU,
/// both averaged over the classes present in the ground truth.
///
/// Accepts any number of aligned label-map pairs; counts are pooled.
pub fn pair_eval(pairs: &[(LabelMap, LabelMap)], num_classes: usize) -> Result<PairEvalReport> {
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (pred, gt) in pairs {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(input_err!("label maps differ in shape"));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            for c in [p, g].into_iter().flatten() {
                if c >= num_classes {
                    return Err(input_err!(
                        "class id {c} out of range for {num_classes} classes"
                    ));
                }
            }
            if let Some(g) = g {
                total[g] += 1;
                if p == Some(g) {
                    correct[g] += 1;
                }
            }
            match (p, g) {
                (Some(a), Some(b)) if a == b => union[a] += 1,
                _ => {
                    if let Some(a) = p {
                        union[a] += 1;
                    }
                    if let Some(b) = g {
                        union[b] += 1;
                    }
                }
            }
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| total[c] > 0).collect();
    if present.is_empty() {
        return Err(input_err!("ground truth has no foreground pixels"));
    }
    let k = present.len() as f64;
    Ok(PairEvalReport {
        class_average_acc: present
            .iter()
            .map(|&c| correct[c] as f64 / total[c] as f64)
            .sum::<f64>()
            / k,
        global_acc: correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>() as f64,
        mean_class_iou: present
            .iter()
            .map(|&c| correct[c] as f64 / union[c] as f64)
            .sum::<f64>()
            / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> Mask {
        Mask::from_fn(rows.len(), rows[0].len(), |i, j| {
            rows[i].as_bytes()[j] == b'#'
        })
    }

    #[test]
    fn iou_examples() {
        let a = mask(&["##", ".#"]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            iou(&mask(&["#.", ".."]), &mask(&["..", ".#"])).unwrap(),
            0.0
        );
        let top = mask(&["##", ".."]);
        let left = mask(&["#.", "#."]);
        assert_eq!(iou(&top, &left).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 1.0);
        assert!(iou(&Mask::new(2, 2), &Mask::new(2, 3)).is_err());
    }

    #[test]
    fn overall_and_mean_from_hand_counts() {
        let full = Mask::from_fn(2, 5, |_, _| true);
        let other = Mask::from_fn(4, 5, |i, _| i >= 2);
        let empty_pred = Mask::new(4, 5);
        let gt = Mask::from_fn(4, 5, |i, _| i < 2);
        // unions 10 and 10, intersections 10 and 0
        let r = aggregate(&[(full.clone(), full), (other, gt.clone())]).unwrap();
        assert_eq!(r.mean_iou, 0.5);
        assert_eq!(r.overall_iou, 10.0 / 30.0);
        let r = aggregate(&[(gt.clone(), gt.clone()), (empty_pred, gt)]).unwrap();
        assert_eq!(r.overall_iou, 0.5);
        assert_eq!(r.mean_iou, 0.5);
    }

    #[test]
    fn single_sample_at_062() {
        // 31 of 50 union pixels intersect: IoU 0.62
        let gt = Mask::from_fn(5, 10, |_, _| true);
        let pred = Mask::from_fn(5, 10, |i, j| i * 10 + j < 31);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.62);
        let r = aggregate(&[(pred, gt)]).unwrap();
        assert_eq!(
            [r.p_50, r.p_60, r.p_70, r.p_80, r.p_90],
            [1.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(r.map_50_95, 0.3);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = mask(&["#..", "##.", "..."]);
        let r = aggregate(&[(m.clone(), m.clone()), (m.clone(), m)]).unwrap();
        for v in [
            r.overall_iou,
            r.mean_iou,
            r.p_50,
            r.p_60,
            r.p_70,
            r.p_80,
            r.p_90,
            r.map_50_95,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_list_is_rejected() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn overall_favors_large_regions() {
        let big = Mask::from_fn(20, 20, |_, _| true);
        let small_gt = Mask::from_fn(20, 20, |i, j| i < 2 && j < 2);
        let small_pred = Mask::from_fn(20, 20, |i, j| i >= 18 && j >= 18);
        let r = aggregate(&[(big.clone(), big), (small_pred, small_gt)]).unwrap();
        assert!(r.overall_iou > r.mean_iou);
    }

    #[test]
    fn strict_threshold_boundary() {
        let gt = Mask::from_fn(2, 5, |_, _| true);
        let pred = Mask::from_fn(2, 5, |i, _| i == 0);
        let r = aggregate(&[(pred, gt)]).unwrap();
        assert_eq!(r.p_50, 0.0);
        let table = r.to_table();
        assert!(table.contains("P@0.5") && table.contains("50.0"));
    }

    #[test]
    fn report_json_keys() {
        let m = mask(&["#"]);
        let v = serde_json::to_value(aggregate(&[(m.clone(), m)]).unwrap()).unwrap();
        for k in [
            "overall_iou",
            "mean_iou",
            "p_50",
            "p_60",
            "p_70",
            "p_80",
            "p_90",
            "map_50_95",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    fn labels(v: &[Option<usize>]) -> LabelMap {
        LabelMap {
            height: 1,
            width: v.len(),
            data: v.to_vec(),
        }
    }

    #[test]
    fn pair_eval_examples() {
        let gt = labels(&[Some(0), Some(1), None, Some(1)]);
        let r = pair_eval(&[(gt.clone(), gt)], 2).unwrap();
        assert_eq!(
            (r.class_average_acc, r.global_acc, r.mean_class_iou),
            (1.0, 1.0, 1.0)
        );

        let gt = labels(&[Some(3); 10]);
        let mut p = vec![Some(3); 7];
        p.extend([None, Some(1), None]);
        let r = pair_eval(&[(labels(&p), gt)], 4).unwrap();
        assert!((r.global_acc - 0.7).abs() < 1e-12);
        assert!((r.class_average_acc - 0.7).abs() < 1e-12);

        let gt = labels(&[Some(0), Some(1), Some(1), Some(1), Some(1)]);
        let pred = labels(&[Some(0), None, None, None, None]);
        let r = pair_eval(&[(pred, gt)], 2).unwrap();
        assert_eq!(r.class_average_acc, 0.5);
        assert_eq!(r.global_acc, 0.2);

        assert!(pair_eval(&[(labels(&[None]), labels(&[None]))], 2).is_err());
        assert!(pair_eval(&[(labels(&[Some(5)]), labels(&[Some(0)]))], 2).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(any::<bool>(), h * w),
                prop::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        Mask {
                            height: h,
                            width: w,
                            data: a,
                        },
                        Mask {
                            height: h,
                            width: w,
                            data: b,
                        },
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_monotone((p, g) in arb_pair()) {
            prop_assert_eq!(iou(&p, &g).unwrap(), iou(&g, &p).unwrap());
            prop_assert_eq!(iou(&g, &g).unwrap(), 1.0);
            let before = iou(&p, &g).unwrap();
            if let Some(k) = (0..g.data.len()).find(|&k| g.data[k] && !p.data[k]) {
                let mut q = p.clone();
                q.data[k] = true;
                prop_assert!(iou(&q, &g).unwrap() >= before);
            }
        }

        #[test]
        fn precision_is_non_increasing(samples in prop::collection::vec(arb_pair(), 1..10)) {
            let r = aggregate(&samples).unwrap();
            let p = [r.p_50, r.p_60, r.p_70, r.p_80, r.p_90];
            prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!((0.0..=1.0).contains(&r.map_50_95));
        }
    }
}
