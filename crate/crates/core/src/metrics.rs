//! Binary and semantic change detection metrics from a confusion matrix.
//!
//! The semantic suite follows the separated-kappa convention used by the
//! SECOND benchmark. With `conf` the `(n+1) x (n+1)` matrix
//! (row = ground truth, column = prediction, index 0 = no change):
//!
//! - the change/no-change 2x2 table collapses all semantic classes into one
//!   "change" class; `IoU_nc` and `IoU_c` are its two IoUs and
//!   `mIoU = (IoU_nc + IoU_c) / 2`;
//! - `Sek = κ(conf with cell [0][0] zeroed) · exp(IoU_c - 1)`;
//! - `F_scd` is the harmonic mean of `P_scd = Σ_{c≥1} conf[c][c] / #pred
//!   changed` and `R_scd = Σ_{c≥1} conf[c][c] / #gt changed`;
//! - `OA = trace / total`;
//! - `Pre`, `Rec`, `mF1` average per-class precision, recall and F1 over the
//!   semantic classes that occur in either the ground truth or the prediction.
//!
//! Zero-denominator rules: precision and recall with an empty denominator
//! are 0; an IoU whose union is empty is 1 (both sides agree there is
//! nothing); kappa with `p_e = 1` or an empty matrix is 0; and when no pixel
//! is changed in either map, Sek is 0 and the result is flagged degenerate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ChangeMask, ScdConfusion};

/// Adds one image's pixels to `conf`.
pub fn accumulate(pred: &ChangeMask, gt: &ChangeMask, conf: &mut ScdConfusion) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    accumulate_labels(pred.labels(), gt.labels(), conf)
}

/// Raster form of [`accumulate`]; labels must be within `0..=n_classes`.
/// Nothing is added when any label is out of range.
pub fn accumulate_labels(pred: &[u16], gt: &[u16], conf: &mut ScdConfusion) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted pixels vs {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    let max = conf.n_classes();
    if let Some(&label) = pred.iter().chain(gt).find(|&&l| l as usize > max) {
        return Err(Error::ClassOutOfRange { label, max });
    }
    let side = conf.side();
    let mut local = vec![0u64; side * side];
    for (&p, &g) in pred.iter().zip(gt) {
        local[g as usize * side + p as usize] += 1;
    }
    conf.merge(&ScdConfusion::from_cells(conf.n_classes(), local)?)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn iou(tp: f64, fp: f64, fn_: f64) -> f64 {
    let union = tp + fp + fn_;
    if union == 0.0 {
        1.0
    } else {
        tp / union
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Change-as-positive metrics for a single-class (binary) confusion.
pub fn binary_metrics(conf: &ScdConfusion) -> Result<BinaryMetrics> {
    if conf.n_classes() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "binary metrics need 1 change class, got {}",
            conf.n_classes()
        )));
    }
    let total = conf.total() as f64;
    if total == 0.0 {
        return Err(Error::EmptyConfusion);
    }
    let tn = conf.get(0, 0) as f64;
    let fp = conf.get(0, 1) as f64;
    let fn_ = conf.get(1, 0) as f64;
    let tp = conf.get(1, 1) as f64;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(BinaryMetrics {
        f1: f1(precision, recall),
        iou: iou(tp, fp, fn_),
        oa: (tp + tn) / total,
        precision,
        recall,
    })
}

/// How `Pre`/`Rec`/`mF1` are aggregated in [`scd_metrics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Mean of per-class values over the semantic classes that occur.
    #[default]
    ClassAveraged,
    /// Change-vs-no-change precision/recall from the collapsed 2x2 table.
    ChangeMicro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScdMetrics {
    pub sek: f64,
    pub f_scd: f64,
    pub miou: f64,
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub mf1: f64,
    pub kappa_n0: f64,
    pub iou_change: f64,
    pub iou_no_change: f64,
    /// No changed pixel in either map; Sek is reported as 0.
    pub degenerate: bool,
}

/// Cohen's kappa of a square matrix given as row-major cells.
fn kappa(cells: &[f64], side: usize) -> f64 {
    let total: f64 = cells.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let po = (0..side).map(|i| cells[i * side + i]).sum::<f64>() / total;
    let pe = (0..side)
        .map(|i| {
            let row: f64 = (0..side).map(|j| cells[i * side + j]).sum();
            let col: f64 = (0..side).map(|j| cells[j * side + i]).sum();
            row * col
        })
        .sum::<f64>()
        / (total * total);
    if pe == 1.0 {
        0.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

pub fn scd_metrics(conf: &ScdConfusion, mode: PrecisionMode) -> Result<ScdMetrics> {
    let n = conf.n_classes();
    if n == 0 {
        return Err(Error::ShapeMismatch(
            "semantic metrics need at least one class".into(),
        ));
    }
    let total = conf.total() as f64;
    if total == 0.0 {
        return Err(Error::EmptyConfusion);
    }
    let side = conf.side();
    let cell = |g: usize, p: usize| conf.get(g, p) as f64;
    let row_sum = |g: usize| (0..side).map(|p| cell(g, p)).sum::<f64>();
    let col_sum = |p: usize| (0..side).map(|g| cell(g, p)).sum::<f64>();

    // collapsed change / no-change table
    let tn = cell(0, 0);
    let fp = row_sum(0) - tn;
    let fn_ = col_sum(0) - tn;
    let tp = total - tn - fp - fn_;
    let iou_no_change = iou(tn, fn_, fp);
    let iou_change = iou(tp, fp, fn_);
    let miou = 0.5 * (iou_no_change + iou_change);

    let mut zeroed: Vec<f64> = conf.cells().iter().map(|&c| c as f64).collect();
    zeroed[0] = 0.0;
    let kappa_n0 = kappa(&zeroed, side);

    let gt_changed = total - row_sum(0);
    let pred_changed = total - col_sum(0);
    let degenerate = gt_changed == 0.0 && pred_changed == 0.0;
    let sek = if degenerate {
        0.0
    } else {
        kappa_n0 * (iou_change - 1.0).exp()
    };

    let semantic_hits: f64 = (1..side).map(|c| cell(c, c)).sum();
    let f_scd = f1(
        ratio(semantic_hits, pred_changed),
        ratio(semantic_hits, gt_changed),
    );

    let oa = (0..side).map(|c| cell(c, c)).sum::<f64>() / total;

    let (precision, recall, mf1) = match mode {
        PrecisionMode::ClassAveraged => {
            let (mut sp, mut sr, mut sf, mut k) = (0.0, 0.0, 0.0, 0.0);
            for c in 1..side {
                let (rows, cols) = (row_sum(c), col_sum(c));
                if rows == 0.0 && cols == 0.0 {
                    continue;
                }
                let p = ratio(cell(c, c), cols);
                let r = ratio(cell(c, c), rows);
                sp += p;
                sr += r;
                sf += f1(p, r);
                k += 1.0;
            }
            (ratio(sp, k), ratio(sr, k), ratio(sf, k))
        }
        PrecisionMode::ChangeMicro => {
            let p = ratio(tp, tp + fp);
            let r = ratio(tp, tp + fn_);
            (p, r, f1(p, r))
        }
    };

    Ok(ScdMetrics {
        sek,
        f_scd,
        miou,
        oa,
        precision,
        recall,
        mf1,
        kappa_n0,
        iou_change,
        iou_no_change,
        degenerate,
    })
}

/// Percentage table in the column order `Sek F_scd mIoU Pre Rec mF1 OA`.
pub fn format_scd_table(m: &ScdMetrics) -> String {
    let header = format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "Sek", "F_scd", "mIoU", "Pre.", "Rec.", "mF1", "OA"
    );
    let row = [m.sek, m.f_scd, m.miou, m.precision, m.recall, m.mf1, m.oa]
        .iter()
        .map(|v| format!("{:>8.2}", v * 100.0))
        .collect::<Vec<_>>()
        .join(" ");
    format!("{header}\n{row}\n")
}

/// Percentage table in the column order `F1 IoU OA Pre Rec`.
pub fn format_binary_table(m: &BinaryMetrics) -> String {
    let header = format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8}",
        "F1", "IoU", "OA", "Pre.", "Rec."
    );
    let row = [m.f1, m.iou, m.oa, m.precision, m.recall]
        .iter()
        .map(|v| format!("{:>8.2}", v * 100.0))
        .collect::<Vec<_>>()
        .join(" ");
    format!("{header}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChangeClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(labels: Vec<u16>, n: u16) -> ChangeMask {
        let table = (1..=n)
            .map(|i| ChangeClass::new(i, format!("c{i}"), "t"))
            .collect();
        ChangeMask::new(4, 4, labels, table).unwrap()
    }

    #[test]
    fn identical_masks_fill_diagonal() {
        let labels: Vec<u16> = (0..16).map(|i| (i % 2) as u16).collect();
        let m = mask(labels, 1);
        let mut conf = ScdConfusion::new(1);
        accumulate(&m, &m, &mut conf).unwrap();
        assert_eq!(conf.cells(), &[8, 0, 0, 8]);
    }

    #[test]
    fn disjoint_masks_fill_off_diagonal() {
        let a: Vec<u16> = (0..16).map(|i| (i % 2) as u16).collect();
        let b: Vec<u16> = a.iter().map(|l| 1 - l).collect();
        let mut conf = ScdConfusion::new(1);
        accumulate(&mask(a, 1), &mask(b, 1), &mut conf).unwrap();
        assert_eq!(conf.cells(), &[0, 8, 8, 0]);
    }

    #[test]
    fn accumulate_errors() {
        let mut conf = ScdConfusion::new(1);
        let out_of_range = vec![2u16; 4];
        assert!(matches!(
            accumulate_labels(&out_of_range, &[0; 4], &mut conf),
            Err(Error::ClassOutOfRange { label: 2, max: 1 })
        ));
        assert_eq!(conf.total(), 0);
        assert!(matches!(
            accumulate_labels(&[0; 3], &[0; 4], &mut conf),
            Err(Error::ShapeMismatch(_))
        ));
        let small = ChangeMask::blank(2, 2).unwrap();
        let big = ChangeMask::blank(4, 4).unwrap();
        assert!(accumulate(&small, &big, &mut conf).is_err());
    }

    #[test]
    fn binary_perfect_and_all_negative() {
        let m = binary_metrics(&ScdConfusion::from_cells(1, vec![10, 0, 0, 6]).unwrap()).unwrap();
        assert_eq!((m.f1, m.iou, m.oa), (1.0, 1.0, 1.0));
        let m = binary_metrics(&ScdConfusion::from_cells(1, vec![10, 0, 6, 0]).unwrap()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(matches!(
            binary_metrics(&ScdConfusion::new(1)),
            Err(Error::EmptyConfusion)
        ));
        assert!(binary_metrics(&ScdConfusion::new(2)).is_err());
    }

    #[test]
    fn binary_matches_pixel_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<u16> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let gt: Vec<u16> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let mut conf = ScdConfusion::new(1);
        accumulate_labels(&pred, &gt, &mut conf).unwrap();
        let m = binary_metrics(&conf).unwrap();
        let count = |p: u16, g: u16| {
            pred.iter()
                .zip(&gt)
                .filter(|(&a, &b)| a == p && b == g)
                .count() as f64
        };
        let (tp, fp, fn_, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
        assert!((m.precision - tp / (tp + fp)).abs() < 1e-12);
        assert!((m.recall - tp / (tp + fn_)).abs() < 1e-12);
        assert!((m.iou - tp / (tp + fp + fn_)).abs() < 1e-12);
        assert!((m.oa - (tp + tn) / 100.0).abs() < 1e-12);
        let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
        assert!((m.f1 - f1).abs() < 1e-12);
    }

    #[test]
    fn transpose_swaps_precision_and_recall() {
        let conf = ScdConfusion::from_cells(1, vec![50, 7, 3, 20]).unwrap();
        let a = binary_metrics(&conf).unwrap();
        let b = binary_metrics(&conf.transposed()).unwrap();
        assert!((a.precision - b.recall).abs() < 1e-15);
        assert!((a.recall - b.precision).abs() < 1e-15);
    }

    #[test]
    fn perfect_multiclass() {
        let conf = ScdConfusion::from_cells(
            3,
            vec![
                40, 0, 0, 0, //
                0, 5, 0, 0, //
                0, 0, 9, 0, //
                0, 0, 0, 2,
            ],
        )
        .unwrap();
        let m = scd_metrics(&conf, PrecisionMode::ClassAveraged).unwrap();
        assert_eq!((m.miou, m.f_scd, m.oa), (1.0, 1.0, 1.0));
        assert_eq!((m.precision, m.recall, m.mf1), (1.0, 1.0, 1.0));
        assert_eq!(m.sek, m.kappa_n0);
        assert!(m.sek <= 1.0 && m.sek.is_finite());
        assert!(!m.degenerate);
    }

    #[test]
    fn all_no_change_is_degenerate() {
        let conf = ScdConfusion::from_cells(2, vec![16, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let m = scd_metrics(&conf, PrecisionMode::ClassAveraged).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.sek, 0.0);
        assert_eq!(m.oa, 1.0);
    }

    #[test]
    fn change_micro_mode() {
        let conf = ScdConfusion::from_cells(2, vec![10, 2, 1, 3, 4, 1, 0, 2, 5]).unwrap();
        let m = scd_metrics(&conf, PrecisionMode::ChangeMicro).unwrap();
        // changed predicted: 2+1+4+1+2+5 = 15, of which gt changed: 12
        assert!((m.precision - 12.0 / 15.0).abs() < 1e-15);
        // gt changed: 3+4+1+0+2+5 = 15, of which predicted changed: 12
        assert!((m.recall - 12.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn table_layout() {
        let conf = ScdConfusion::from_cells(1, vec![3, 1, 1, 3]).unwrap();
        let t = format_scd_table(&scd_metrics(&conf, PrecisionMode::default()).unwrap());
        assert!(t.starts_with("     Sek"));
        assert_eq!(t.lines().count(), 2);
        let b = format_binary_table(&binary_metrics(&conf).unwrap());
        assert!(b.contains("75.00"));
    }
}
