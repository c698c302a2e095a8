//! CSV renderings of evaluation results.

use std::fmt::Write;

use bsd2nn::network::NUM_CLASSES;
use bsd2nn::training::{BaseLearnerReport, Evaluation};

/// Per-class precision/recall with the confusion row (`pred_k` counts)
/// for each true class, then an `overall` row holding the accuracy and
/// the predicted-class totals.
pub fn evaluation_csv(e: &Evaluation) -> String {
    let mut s = String::from("class,support,precision,recall");
    for k in 0..NUM_CLASSES {
        let _ = write!(s, ",pred_{k}");
    }
    s.push('\n');
    for c in 0..NUM_CLASSES {
        let support: u64 = e.confusion[c].iter().sum();
        let _ = write!(s, "{c},{support},{:.6},{:.6}", e.precision(c), e.recall(c));
        for k in 0..NUM_CLASSES {
            let _ = write!(s, ",{}", e.confusion[c][k]);
        }
        s.push('\n');
    }
    let acc = e.accuracy();
    let _ = write!(s, "overall,{},{acc:.6},{acc:.6}", e.count);
    for k in 0..NUM_CLASSES {
        let _ = write!(s, ",{}", (0..NUM_CLASSES).map(|c| e.confusion[c][k]).sum::<u64>());
    }
    s.push('\n');
    s
}

pub fn base_learners_csv(r: &BaseLearnerReport) -> String {
    let mut s = String::from("learner,wavelength_um,accuracy\n");
    for (l, e) in r.wavelengths.iter().zip(&r.base) {
        let _ = writeln!(s, "base,{l},{:.6}", e.accuracy());
    }
    let _ = writeln!(s, "ensemble,,{:.6}", r.ensemble.accuracy());
    let _ = writeln!(s, "base_mean,,{:.6}", r.mean_base_accuracy());
    s
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("wavelength_um,accuracy\n");
    for (l, a) in rows {
        let _ = writeln!(s, "{l:.6},{a:.6}");
    }
    s
}
