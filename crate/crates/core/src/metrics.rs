//! Segmentation scores: confusion matrices, pixel/mean accuracy, mIoU, and
//! the bipartite protocol for unlabeled mask proposals.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::hungarian_match;

pub const IGNORE: u8 = 255;

/// Integer label map; `IGNORE` marks pixels excluded from scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMask {
    pub labels: Array2<u8>,
    pub num_classes: usize,
}

impl IndexMask {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            return Err(Error::Input(format!("label {bad} not below {num_classes} classes")));
        }
        Ok(IndexMask { labels, num_classes })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[gt][pred]`.
    pub counts: Array2<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.counts.dim() != self.counts.dim() {
            return Err(Error::Input("confusion matrices have different class counts".into()));
        }
        self.counts += &other.counts;
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Counts `(gt, pred)` label pairs, skipping pixels where either is `ignore`.
pub fn confusion(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize, ignore: u8) -> Result<ConfusionMatrix> {
    if pred.dim() != gt.dim() {
        return Err(Error::Input(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == ignore || p == ignore {
            cm.ignored += 1;
            continue;
        }
        let (gi, pi) = (g as usize, p as usize);
        if gi >= num_classes || pi >= num_classes {
            return Err(Error::Input(format!(
                "label {} out of range for {num_classes} classes",
                gi.max(pi)
            )));
        }
        cm.counts[[gi, pi]] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub pacc: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub valid_classes: usize,
}

pub fn seg_scores(cm: &ConfusionMatrix) -> Result<SegScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let c = cm.num_classes();
    let mut correct = 0u64;
    let (mut acc_sum, mut acc_n) = (0.0, 0usize);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let mut per_class_iou = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[[k, k]];
        let gt_k: u64 = cm.counts.row(k).sum();
        let pred_k: u64 = cm.counts.column(k).sum();
        correct += tp;
        if gt_k > 0 {
            acc_sum += tp as f64 / gt_k as f64;
            acc_n += 1;
        }
        let union = gt_k + pred_k - tp;
        if union > 0 {
            let iou = tp as f64 / union as f64;
            iou_sum += iou;
            iou_n += 1;
            per_class_iou.push(Some(iou));
        } else {
            per_class_iou.push(None);
        }
    }
    Ok(SegScores {
        pacc: correct as f64 / total as f64,
        macc: if acc_n > 0 { acc_sum / acc_n as f64 } else { 0.0 },
        miou: iou_sum / iou_n as f64,
        per_class_iou,
        valid_classes: iou_n,
    })
}

/// Min-max normalizes a proposal and thresholds it at 0.5.
pub fn binarize_proposal(p: &Array2<f64>) -> Array2<bool> {
    let (lo, hi) = p
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    p.mapv(|v| range > 1e-12 && (v - lo) / range >= 0.5)
}

fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-image statistics of the proposal protocol: index `k` of the
/// returned matrix corresponds to gt mask `k` (binary TP/FP/FN tallies).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalTally {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

/// Matches binarized proposals to gt masks (cost `1 − IoU`) and tallies
/// pixel TP/FP/FN per gt mask. Unmatched gt masks count entirely as FN.
pub fn proposal_tally(proposals: &[Array2<f64>], gt_masks: &[Array2<bool>]) -> Result<ProposalTally> {
    if gt_masks.is_empty() {
        return Err(Error::Input("no ground-truth masks to evaluate against".into()));
    }
    let dim = gt_masks[0].dim();
    if gt_masks.iter().any(|g| g.dim() != dim) || proposals.iter().any(|p| p.dim() != dim) {
        return Err(Error::Input("proposals and masks must share one size".into()));
    }
    let bins: Vec<Array2<bool>> = proposals.iter().map(binarize_proposal).collect();
    let cost: Vec<Vec<f64>> = bins
        .iter()
        .map(|b| gt_masks.iter().map(|g| 1.0 - iou(b, g)).collect())
        .collect();
    let matched = hungarian_match(&cost)?;
    let k = gt_masks.len();
    let mut tally = ProposalTally {
        tp: vec![0; k],
        fp: vec![0; k],
        fn_: gt_masks
            .iter()
            .map(|g| g.iter().filter(|&&x| x).count() as u64)
            .collect(),
    };
    for &(pi, gi) in &matched.pairs {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &g) in bins[pi].iter().zip(gt_masks[gi].iter()) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        tally.tp[gi] = tp;
        tally.fp[gi] = fp;
        tally.fn_[gi] = fn_;
    }
    Ok(tally)
}

/// Accumulates proposal tallies per class across images.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ProposalAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ProposalAccumulator {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    /// Adds one image; `classes[k]` is the class of gt mask `k`.
    pub fn add(&mut self, tally: &ProposalTally, classes: &[usize]) -> Result<()> {
        if classes.len() != tally.tp.len() {
            return Err(Error::Input("one class id per gt mask is required".into()));
        }
        for (k, &c) in classes.iter().enumerate() {
            if c >= self.tp.len() {
                return Err(Error::Input(format!("class {c} out of range")));
            }
            self.tp[c] += tally.tp[k];
            self.fp[c] += tally.fp[k];
            self.fn_[c] += tally.fn_[k];
        }
        Ok(())
    }

    /// pACC = ΣTP/Σ(TP+FN); per-class accuracy TP/(TP+FN); IoU TP/(TP+FP+FN).
    pub fn scores(&self) -> Result<SegScores> {
        let total: u64 = self.tp.iter().zip(&self.fn_).map(|(a, b)| a + b).sum();
        if total == 0 {
            return Err(Error::Input("no ground-truth pixels were evaluated".into()));
        }
        let mut per_class_iou = Vec::new();
        let (mut acc, mut acc_n, mut iou_sum, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..self.tp.len() {
            let (tp, fp, fn_) = (self.tp[c], self.fp[c], self.fn_[c]);
            if tp + fn_ > 0 {
                acc += tp as f64 / (tp + fn_) as f64;
                acc_n += 1;
            }
            if tp + fp + fn_ > 0 {
                let v = tp as f64 / (tp + fp + fn_) as f64;
                iou_sum += v;
                iou_n += 1;
                per_class_iou.push(Some(v));
            } else {
                per_class_iou.push(None);
            }
        }
        Ok(SegScores {
            pacc: self.tp.iter().sum::<u64>() as f64 / total as f64,
            macc: acc / acc_n as f64,
            miou: iou_sum / iou_n as f64,
            per_class_iou,
            valid_classes: iou_n,
        })
    }
}

/// Scores one image's proposals, treating every gt mask as its own class.
pub fn unsup_eval(
    proposals: &[Array2<f64>],
    gt_masks: &[Array2<bool>],
    classes: &[usize],
    num_classes: usize,
) -> Result<SegScores> {
    let tally = proposal_tally(proposals, gt_masks)?;
    let mut acc = ProposalAccumulator::new(num_classes);
    acc.add(&tally, classes)?;
    acc.scores()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn worked_two_by_two() {
        let gt = array![[0u8, 0], [1, 1]];
        let pred = array![[0u8, 1], [1, 1]];
        let cm = confusion(&pred, &gt, 2, IGNORE).unwrap();
        assert_eq!(cm.counts, array![[1u64, 1], [0, 2]]);
        let s = seg_scores(&cm).unwrap();
        assert!((s.pacc - 0.75).abs() < 1e-12);
        assert!((s.macc - 0.75).abs() < 1e-12);
        assert!((s.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let all_ignore = Array2::from_elem((3, 3), IGNORE);
        let cm = confusion(&all_ignore, &all_ignore, 4, IGNORE).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored, 9);
        assert!(seg_scores(&cm).is_err());
        assert!(confusion(&array![[5u8]], &array![[0u8]], 3, IGNORE).is_err());
        assert!(confusion(&array![[0u8, 0]], &array![[0u8]], 3, IGNORE).is_err());
        let one = confusion(&array![[2u8, 2]], &array![[2u8, 2]], 3, IGNORE).unwrap();
        let s = seg_scores(&one).unwrap();
        assert_eq!((s.pacc, s.macc, s.miou, s.valid_classes), (1.0, 1.0, 1.0, 1));
        assert!(IndexMask::new(array![[3u8]], 3).is_err());
        assert!(IndexMask::new(array![[IGNORE, 2]], 3).is_ok());
    }

    fn brute_scores(pred: &Array2<u8>, gt: &Array2<u8>, c: usize) -> (f64, f64, f64) {
        let mut correct = 0;
        let mut total = 0;
        let mut accs = Vec::new();
        let mut ious = Vec::new();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p != IGNORE && g != IGNORE {
                total += 1;
                correct += (p == g) as usize;
            }
        }
        for k in 0..c as u8 {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                if p == IGNORE || g == IGNORE {
                    continue;
                }
                if p == k && g == k {
                    tp += 1;
                } else if p == k {
                    fp += 1;
                } else if g == k {
                    fn_ += 1;
                }
            }
            if tp + fn_ > 0 {
                accs.push(tp as f64 / (tp + fn_) as f64);
            }
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (correct as f64 / total as f64, mean(&accs), mean(&ious))
    }

    #[test]
    fn matches_pixel_counting_oracle() {
        for trial in 0..100u64 {
            let mut rng = split(trial, 55, &[]);
            let c = rng.random_range(1..=5);
            let label = |rng: &mut rand_chacha::ChaCha8Rng| {
                if rng.random::<f64>() < 0.1 {
                    IGNORE
                } else {
                    rng.random_range(0..c) as u8
                }
            };
            let gt = Array2::from_shape_simple_fn((8, 8), || label(&mut rng));
            let pred = Array2::from_shape_simple_fn((8, 8), || label(&mut rng));
            let cm = confusion(&pred, &gt, c, IGNORE).unwrap();
            if cm.total() == 0 {
                continue;
            }
            let s = seg_scores(&cm).unwrap();
            let (pacc, macc, miou) = brute_scores(&pred, &gt, c);
            assert_eq!(s.pacc, pacc);
            assert_eq!(s.macc, macc);
            assert_eq!(s.miou, miou);
            assert!(s.miou <= s.macc + 1e-12);
        }
    }

    #[test]
    fn confusion_is_additive() {
        let gt = array![[0u8, 1, 2, 1]];
        let pred = array![[0u8, 2, 2, 1]];
        let whole = confusion(&pred, &gt, 3, IGNORE).unwrap();
        let mut a = confusion(
            &pred.slice(ndarray::s![.., ..2]).to_owned(),
            &gt.slice(ndarray::s![.., ..2]).to_owned(),
            3,
            IGNORE,
        )
        .unwrap();
        let b = confusion(
            &pred.slice(ndarray::s![.., 2..]).to_owned(),
            &gt.slice(ndarray::s![.., 2..]).to_owned(),
            3,
            IGNORE,
        )
        .unwrap();
        a.add(&b).unwrap();
        assert_eq!(a, whole);
    }

    fn mask(bits: &[u8]) -> Array2<bool> {
        Array2::from_shape_vec((1, bits.len()), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn unsupervised_protocol() {
        let g0 = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let g1 = mask(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let as_prop = |m: &Array2<bool>| m.mapv(|b| b as u8 as f64);
        let s = unsup_eval(&[as_prop(&g1), as_prop(&g0)], &[g0.clone(), g1.clone()], &[0, 1], 2).unwrap();
        assert_eq!(s.miou, 1.0);
        let none = unsup_eval(&[], &[g0.clone(), g1.clone()], &[0, 1], 2).unwrap();
        assert_eq!(none.miou, 0.0);
        assert_eq!(none.pacc, 0.0);
        assert!(unsup_eval(&[], &[], &[], 2).is_err());
    }

    #[test]
    fn unsupervised_picks_best_pairing() {
        // With disjoint gt masks the cross IoUs cannot reach 0.3/0.2 while the
        // diagonal is 0.8/0.9, so check the assignment on the IoU table itself.
        let iou_table = [[0.8, 0.3], [0.2, 0.9]];
        let cost: Vec<Vec<f64>> = iou_table.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let mean: f64 = m.pairs.iter().map(|&(i, j)| iou_table[i][j]).sum::<f64>() / 2.0;
        assert!((mean - 0.85).abs() < 1e-12);

        // IoU(p0, g0) = 0.8, IoU(p1, g1) = 0.9, proposals listed in swapped order
        let g0 = mask(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let p0 = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let g1 = mask(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        let p1 = mask(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        let props = [p1.mapv(|b| b as u8 as f64), p0.mapv(|b| b as u8 as f64)];
        let gts = [g0, g1];
        let tally = proposal_tally(&props, &gts).unwrap();
        assert_eq!(tally.tp, vec![4, 9]);
        assert_eq!(tally.fn_, vec![1, 1]);
        let s = unsup_eval(&props, &gts, &[0, 1], 2).unwrap();
        assert!((s.miou - 0.85).abs() < 1e-12);
    }

    #[test]
    fn binarization_uses_min_max() {
        let p = array![[0.1, 0.2, 0.3]];
        assert_eq!(binarize_proposal(&p), array![[false, true, true]]);
        assert_eq!(binarize_proposal(&array![[0.4, 0.4]]), array![[false, false]]);
    }
}
