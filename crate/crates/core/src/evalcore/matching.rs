//! Region matching: don't-care suppression, one-to-one IoU matching and
//! area-coverage matching with split/merge correspondences.

use crate::geometry::{intersection_area, iou, Quad};

/// Partition of detection indices into considered and ignored.
pub fn filter_dontcare(dets: &[Quad], dont_care: &[Quad], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let mut considered = Vec::new();
    let mut ignored = Vec::new();
    for (j, d) in dets.iter().enumerate() {
        let area = d.area();
        let suppressed = dont_care
            .iter()
            .any(|g| intersection_area(d, g) / area > threshold);
        if suppressed {
            ignored.push(j);
        } else {
            considered.push(j);
        }
    }
    (considered, ignored)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouPair {
    pub gt: usize,
    pub det: usize,
    pub iou: f64,
}

/// Greedy one-to-one matching over pairs with `iou >= threshold`, taken by
/// descending IoU, then GT index, then detection index.
pub fn match_iou(gt: &[Quad], dets: &[Quad], threshold: f64) -> Vec<IouPair> {
    let mut cand = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            let v = iou(g, d);
            if v >= threshold {
                cand.push(IouPair { gt: i, det: j, iou: v });
            }
        }
    }
    cand.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.gt.cmp(&b.gt))
            .then(a.det.cmp(&b.det))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; dets.len()];
    let mut out = Vec::new();
    for p in cand {
        if !gt_used[p.gt] && !det_used[p.det] {
            gt_used[p.gt] = true;
            det_used[p.det] = true;
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetEvalParams {
    pub area_recall: f64,
    pub area_precision: f64,
    pub scatter_penalty: f64,
}

impl Default for DetEvalParams {
    fn default() -> Self {
        DetEvalParams {
            area_recall: 0.8,
            area_precision: 0.4,
            scatter_penalty: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKind {
    OneToOne,
    OneToMany,
    ManyToOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGroup {
    pub kind: GroupKind,
    pub gt: Vec<usize>,
    pub det: Vec<usize>,
    /// Area recall of the group: single value for one-to-one, summed over
    /// dets for one-to-many, per GT mean for many-to-one.
    pub area_recall: f64,
    pub area_precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetEvalOutcome {
    pub groups: Vec<CoverageGroup>,
    pub gt_credit: Vec<f64>,
    pub det_credit: Vec<f64>,
}

pub fn match_deteval(gt: &[Quad], dets: &[Quad], p: &DetEvalParams) -> DetEvalOutcome {
    let (n, m) = (gt.len(), dets.len());
    let mut recall = vec![vec![0.0; m]; n];
    let mut precision = vec![vec![0.0; m]; n];
    for (i, g) in gt.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            let inter = intersection_area(g, d);
            recall[i][j] = inter / g.area();
            precision[i][j] = inter / d.area();
        }
    }
    let mut gt_credit = vec![0.0; n];
    let mut det_credit = vec![0.0; m];
    let mut gt_used = vec![false; n];
    let mut det_used = vec![false; m];
    let mut groups = Vec::new();

    // One-to-one only where the qualifying pair is unique in its row and
    // column; ambiguous pairs are left to the split/merge passes.
    let qualifies = |i: usize, j: usize| recall[i][j] >= p.area_recall && precision[i][j] >= p.area_precision;
    let row_count: Vec<usize> = (0..n).map(|i| (0..m).filter(|&j| qualifies(i, j)).count()).collect();
    let col_count: Vec<usize> = (0..m).map(|j| (0..n).filter(|&i| qualifies(i, j)).count()).collect();
    for i in 0..n {
        for j in 0..m {
            if qualifies(i, j) && row_count[i] == 1 && col_count[j] == 1 {
                gt_used[i] = true;
                det_used[j] = true;
                gt_credit[i] = 1.0;
                det_credit[j] = 1.0;
                groups.push(CoverageGroup {
                    kind: GroupKind::OneToOne,
                    gt: vec![i],
                    det: vec![j],
                    area_recall: recall[i][j],
                    area_precision: precision[i][j],
                });
            }
        }
    }

    for i in 0..n {
        if gt_used[i] {
            continue;
        }
        let members: Vec<usize> = (0..m)
            .filter(|&j| !det_used[j] && recall[i][j] > 0.0 && precision[i][j] >= p.area_precision)
            .collect();
        let covered: f64 = members.iter().map(|&j| recall[i][j]).sum();
        if members.len() >= 2 && covered >= p.area_recall {
            gt_used[i] = true;
            gt_credit[i] = p.scatter_penalty;
            for &j in &members {
                det_used[j] = true;
                det_credit[j] = p.scatter_penalty;
            }
            let mean_precision = members.iter().map(|&j| precision[i][j]).sum::<f64>() / members.len() as f64;
            groups.push(CoverageGroup {
                kind: GroupKind::OneToMany,
                gt: vec![i],
                det: members,
                area_recall: covered,
                area_precision: mean_precision,
            });
        }
    }

    for j in 0..m {
        if det_used[j] {
            continue;
        }
        let members: Vec<usize> = (0..n)
            .filter(|&i| !gt_used[i] && precision[i][j] > 0.0 && recall[i][j] >= p.area_recall)
            .collect();
        let covered: f64 = members.iter().map(|&i| precision[i][j]).sum();
        if members.len() >= 2 && covered >= p.area_precision {
            det_used[j] = true;
            det_credit[j] = p.scatter_penalty;
            for &i in &members {
                gt_used[i] = true;
                gt_credit[i] = p.scatter_penalty;
            }
            let mean_recall = members.iter().map(|&i| recall[i][j]).sum::<f64>() / members.len() as f64;
            groups.push(CoverageGroup {
                kind: GroupKind::ManyToOne,
                gt: members,
                det: vec![j],
                area_recall: mean_recall,
                area_precision: covered,
            });
        }
    }

    DetEvalOutcome {
        groups,
        gt_credit,
        det_credit,
    }
}
