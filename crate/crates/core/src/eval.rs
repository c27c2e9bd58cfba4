//! mIoU / mAcc of label maps and Gaussian-level accuracy.

use std::fmt;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::Segmentation;
use crate::scene_io::LabelMap;

/// K x K pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("confusion matrix rows must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt * self.classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..self.classes).map(|p| self.get(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, pred)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|g| (0..self.classes).all(|p| g == p || self.get(g, p) == 0))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Pixel confusion between two label maps over `classes` classes.
pub fn confusion(gt: &LabelMap, pred: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if gt.width != pred.width || gt.height != pred.height {
        return Err(Error::DimensionMismatch(format!(
            "ground truth is {}x{}, prediction is {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g as usize >= classes || p as usize >= classes {
            return Err(Error::DimensionMismatch(format!(
                "label {} outside {classes} classes",
                g.max(p)
            )));
        }
        cm.add(g as usize, p as usize, 1);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One confusion matrix summed over every view.
    Pooled,
    /// Metrics per view, then averaged over views.
    PerView,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Pooled => "pooled",
            Protocol::PerView => "per-view",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class_id: usize,
    /// `None` when the class is excluded from the IoU mean.
    pub iou: Option<f64>,
    /// `None` when the class is absent from the ground truth.
    pub acc: Option<f64>,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassMetric>,
}

/// IoU_i = TP / (TP + FP + FN) averaged over classes seen in either map;
/// Acc_i = TP / (TP + FN) averaged over classes seen in the ground truth.
pub fn class_metrics(cm: &ConfusionMatrix, include_background: bool) -> Result<Metrics> {
    if cm.classes() == 0 || cm.total() == 0 {
        return Err(Error::EmptyMetric("confusion matrix has no counts".into()));
    }
    let first = usize::from(!include_background);
    let mut per_class = Vec::new();
    for c in first..cm.classes() {
        let tp = cm.get(c, c);
        let gt = cm.row_sum(c);
        let pred = cm.col_sum(c);
        let union = gt + pred - tp;
        per_class.push(ClassMetric {
            class_id: c,
            iou: (union > 0).then(|| tp as f64 / union as f64),
            acc: (gt > 0).then(|| tp as f64 / gt as f64),
            gt_pixels: gt,
            pred_pixels: pred,
        });
    }
    let mean = |values: Vec<f64>| (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    let miou = mean(per_class.iter().filter_map(|m| m.iou).collect());
    let macc = mean(per_class.iter().filter_map(|m| m.acc).collect());
    match (miou, macc) {
        (Some(miou), Some(macc)) => Ok(Metrics { miou, macc, per_class }),
        _ => Err(Error::EmptyMetric("no class is present in the ground truth".into())),
    }
}

/// `(mIoU, mAcc)` of a confusion matrix.
pub fn miou_macc(cm: &ConfusionMatrix, include_background: bool) -> Result<(f64, f64)> {
    class_metrics(cm, include_background).map(|m| (m.miou, m.macc))
}

/// Fraction of Gaussians whose segmented class equals the planted label.
pub fn gaussian_accuracy(seg: &Segmentation, planted: &[u32]) -> Result<f64> {
    if seg.len() != planted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} segmented gaussians, {} planted labels",
            seg.len(),
            planted.len()
        )));
    }
    if planted.is_empty() {
        return Err(Error::EmptyMetric("no gaussians".into()));
    }
    let hits = seg.class_of.iter().zip(planted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / planted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub id: u32,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub include_background: bool,
    pub class_names: Vec<String>,
    pub miou: f64,
    pub macc: f64,
    /// Pooled per-class breakdown, reported under either protocol.
    pub per_class: Vec<ClassMetric>,
    pub views: Vec<ViewMetrics>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian_accuracy: Option<f64>,
}

/// Evaluates `(id, ground truth, prediction)` triples.
pub fn evaluate_views(
    pairs: &[(u32, LabelMap, LabelMap)],
    class_names: &[String],
    protocol: Protocol,
    include_background: bool,
) -> Result<EvalReport> {
    let classes = class_names.len();
    let matrices: Vec<ConfusionMatrix> = pairs
        .par_iter()
        .map(|(_, gt, pred)| confusion(gt, pred, classes))
        .collect::<Result<_>>()?;
    let mut pooled = ConfusionMatrix::zeros(classes);
    for cm in &matrices {
        pooled.merge(cm)?;
    }
    let pooled_metrics = class_metrics(&pooled, include_background)?;

    let views: Vec<ViewMetrics> = pairs
        .iter()
        .zip(&matrices)
        .map(|((id, _, _), cm)| {
            let m = class_metrics(cm, include_background).ok();
            ViewMetrics {
                id: *id,
                miou: m.as_ref().map(|m| m.miou),
                macc: m.as_ref().map(|m| m.macc),
            }
        })
        .collect();

    let (miou, macc) = match protocol {
        Protocol::Pooled => (pooled_metrics.miou, pooled_metrics.macc),
        Protocol::PerView => {
            let scored: Vec<&ViewMetrics> = views.iter().filter(|v| v.miou.is_some()).collect();
            if scored.is_empty() {
                return Err(Error::EmptyMetric(
                    "no view has ground-truth pixels of an evaluated class".into(),
                ));
            }
            let n = scored.len() as f64;
            (
                scored.iter().filter_map(|v| v.miou).sum::<f64>() / n,
                scored.iter().filter_map(|v| v.macc).sum::<f64>() / n,
            )
        }
    };

    Ok(EvalReport {
        protocol,
        include_background,
        class_names: class_names.to_vec(),
        miou,
        macc,
        per_class: pooled_metrics.per_class,
        views,
        confusion: pooled.rows(),
        gaussian_accuracy: None,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bg = if self.include_background { "with" } else { "without" };
        writeln!(
            f,
            "protocol: {} ({bg} background), {} views",
            self.protocol,
            self.views.len()
        )?;
        writeln!(
            f,
            "{:<4} {:<20} {:>8} {:>8} {:>10} {:>10}",
            "id", "class", "IoU", "Acc", "gt px", "pred px"
        )?;
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for m in &self.per_class {
            let name = self.class_names.get(m.class_id).map_or("?", String::as_str);
            writeln!(
                f,
                "{:<4} {:<20} {:>8} {:>8} {:>10} {:>10}",
                m.class_id,
                name,
                cell(m.iou),
                cell(m.acc),
                m.gt_pixels,
                m.pred_pixels
            )?;
        }
        write!(f, "mIoU {:.4}  mAcc {:.4}", self.miou, self.macc)?;
        if let Some(acc) = self.gaussian_accuracy {
            write!(f, "  gaussian accuracy {acc:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: u32, h: u32, labels: Vec<u32>) -> LabelMap {
        LabelMap::new(w, h, labels).unwrap()
    }

    #[test]
    fn identical_maps_are_diagonal() {
        let gt = map(3, 2, vec![0, 1, 2, 2, 1, 0]);
        let cm = confusion(&gt, &gt, 3).unwrap();
        assert!(cm.is_diagonal());
        assert_eq!(miou_macc(&cm, true).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn single_wrong_pixel() {
        let cm = confusion(&map(1, 1, vec![0]), &map(1, 1, vec![1]), 2).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn two_class_closed_form() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        let m = class_metrics(&cm, true).unwrap();
        assert!((m.miou - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.macc - 0.5).abs() < 1e-15);
        for c in &m.per_class {
            assert!((c.iou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_classes_are_excluded() {
        // Class 2 never appears; class 1 is predicted but absent from GT.
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        let m = class_metrics(&cm, true).unwrap();
        assert_eq!(m.per_class[2].iou, None);
        assert_eq!(m.per_class[1].iou, Some(0.0));
        assert_eq!(m.per_class[1].acc, None);
        assert!((m.miou - 0.375).abs() < 1e-15);
        assert!((m.macc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn background_exclusion() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 5], vec![0, 10]]).unwrap();
        let (miou, macc) = miou_macc(&cm, false).unwrap();
        assert!((miou - 10.0 / 15.0).abs() < 1e-15);
        assert_eq!(macc, 1.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(miou_macc(&ConfusionMatrix::zeros(3), true).is_err());
        assert!(miou_macc(&ConfusionMatrix::zeros(0), true).is_err());
    }

    #[test]
    fn mismatched_maps_rejected() {
        assert!(confusion(&map(2, 1, vec![0, 0]), &map(1, 2, vec![0, 0]), 2).is_err());
    }

    #[test]
    fn gaussian_accuracy_cases() {
        let seg = Segmentation {
            class_of: vec![1, 2, 0, 1],
            confidence: vec![1.0; 4],
        };
        assert_eq!(gaussian_accuracy(&seg, &[1, 2, 0, 1]).unwrap(), 1.0);
        assert_eq!(gaussian_accuracy(&seg, &[0, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(gaussian_accuracy(&seg, &[1, 2, 0, 2]).unwrap(), 0.75);
        assert!(gaussian_accuracy(&seg, &[1]).is_err());
    }

    #[test]
    fn per_view_protocol_averages_views() {
        let names: Vec<String> = ["bg", "a"].iter().map(|s| s.to_string()).collect();
        let pairs = vec![
            (0, map(2, 1, vec![0, 1]), map(2, 1, vec![0, 1])),
            (1, map(2, 1, vec![0, 1]), map(2, 1, vec![1, 1])),
        ];
        let pooled = evaluate_views(&pairs, &names, Protocol::Pooled, true).unwrap();
        let per_view = evaluate_views(&pairs, &names, Protocol::PerView, true).unwrap();
        // Pooled: cm = [[1,1],[0,2]] -> IoU 1/2, 2/3.
        assert!((pooled.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // Per view: 1.0 and (0 + 1/2) / 2.
        assert!((per_view.miou - (1.0 + 0.25) / 2.0).abs() < 1e-15);
        assert!(!format!("{pooled}").is_empty());
    }

    fn reference_means(rows: &[Vec<u64>]) -> Option<(f64, f64)> {
        let k = rows.len();
        let mut ious = Vec::new();
        let mut accs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            let tp = row[i] as f64;
            let fn_: f64 = (0..k).filter(|&j| j != i).map(|j| row[j] as f64).sum();
            let fp: f64 = (0..k).filter(|&j| j != i).map(|j| rows[j][i] as f64).sum();
            if tp + fp + fn_ > 0.0 {
                ious.push(tp / (tp + fp + fn_));
            }
            if tp + fn_ > 0.0 {
                accs.push(tp / (tp + fn_));
            }
        }
        if accs.is_empty() {
            return None;
        }
        Some((
            ious.iter().sum::<f64>() / ious.len() as f64,
            accs.iter().sum::<f64>() / accs.len() as f64,
        ))
    }

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (1usize..6).prop_flat_map(|k| proptest::collection::vec(proptest::collection::vec(0u64..20, k), k))
    }

    proptest! {
        #[test]
        fn matches_reference_formula(rows in matrix()) {
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            match (miou_macc(&cm, true), reference_means(&rows)) {
                (Ok((a, b)), Some((c, d))) => {
                    prop_assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                    prop_assert_eq!(a == 1.0 && b == 1.0, cm.is_diagonal());
                }
                (Err(_), None) => {}
                (x, y) => prop_assert!(false, "{:?} vs {:?}", x, y),
            }
        }

        #[test]
        fn confusion_is_additive_and_counts_gt(
            labels in proptest::collection::vec((0u32..4, 0u32..4), 1..200),
            split in 0usize..200,
        ) {
            let n = labels.len();
            let split = split.min(n);
            let gt: Vec<u32> = labels.iter().map(|l| l.0).collect();
            let pred: Vec<u32> = labels.iter().map(|l| l.1).collect();
            let whole = confusion(&map(n as u32, 1, gt.clone()), &map(n as u32, 1, pred.clone()), 4).unwrap();
            let mut parts = ConfusionMatrix::zeros(4);
            for (a, b) in [(0, split), (split, n)] {
                if a < b {
                    let m = confusion(
                        &map((b - a) as u32, 1, gt[a..b].to_vec()),
                        &map((b - a) as u32, 1, pred[a..b].to_vec()),
                        4,
                    ).unwrap();
                    parts.merge(&m).unwrap();
                }
            }
            prop_assert_eq!(&parts, &whole);
            for c in 0..4 {
                prop_assert_eq!(whole.row_sum(c), gt.iter().filter(|&&g| g == c as u32).count() as u64);
            }
        }
    }
}
