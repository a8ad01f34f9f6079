//! Segmentation and labeling metrics: global and local consistency error,
//! per-class precision, recall and F-measure, accuracy, confusion matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::Category;

/// Global and local consistency error between two segmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Consistency {
    pub gce: f64,
    pub lce: f64,
}

/// GCE and LCE over the pixels selected by `mask` (all pixels when `None`).
///
/// With `n_ab` pixels in region `a` of the first map and `b` of the second,
/// the refinement error of such a pixel is `(n_a - n_ab) / n_a` one way and
/// `(n_b - n_ab) / n_b` the other, so both sums come from the count table.
pub fn gce_lce<A: Ord + Copy, B: Ord + Copy>(s1: &[A], s2: &[B], mask: Option<&[bool]>) -> Result<Consistency> {
    if s1.len() != s2.len() {
        return Err(Error::Shape(format!("segmentations of {} and {} pixels", s1.len(), s2.len())));
    }
    if let Some(m) = mask {
        if m.len() != s1.len() {
            return Err(Error::Shape(format!("mask of {} pixels for {}", m.len(), s1.len())));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut joint: BTreeMap<(A, B), u64> = BTreeMap::new();
    let mut rows: BTreeMap<A, u64> = BTreeMap::new();
    let mut cols: BTreeMap<B, u64> = BTreeMap::new();
    let mut n = 0u64;
    for i in (0..s1.len()).filter(|&i| keep(i)) {
        *joint.entry((s1[i], s2[i])).or_default() += 1;
        *rows.entry(s1[i]).or_default() += 1;
        *cols.entry(s2[i]).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Shape("no pixels to evaluate".into()));
    }
    let (mut e12, mut e21, mut local) = (0.0, 0.0, 0.0);
    for (&(a, b), &nab) in &joint {
        let (na, nb, nab) = (rows[&a] as f64, cols[&b] as f64, nab as f64);
        let forward = (na - nab) / na;
        let backward = (nb - nab) / nb;
        e12 += nab * forward;
        e21 += nab * backward;
        local += nab * forward.min(backward);
    }
    let n = n as f64;
    Ok(Consistency {
        gce: e12.min(e21) / n,
        lce: local / n,
    })
}

/// `2PR / (P + R)`, with `0/0` taken as 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Pixel counts indexed `[truth][prediction]` over the nine categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; Category::COUNT]; Category::COUNT],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: Category, pred: Category) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (v, w) in row.iter_mut().zip(o) {
                *v += w;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..Category::COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn truth_count(&self, c: Category) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn predicted_count(&self, c: Category) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum()
    }
}

/// Precision, recall and F in percent, plus the class's share of the
/// evaluated ground-truth pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub pixel_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    /// One entry per category; `None` when the class is absent from both
    /// prediction and truth.
    pub classes: Vec<(Category, Option<ClassMetrics>)>,
    /// Overall pixel accuracy in percent.
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f_measure: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassificationReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let total = confusion.total();
        let classes: Vec<_> = Category::ALL
            .iter()
            .map(|&c| {
                let tp = confusion.counts[c.index()][c.index()] as f64;
                let truth = confusion.truth_count(c) as f64;
                let pred = confusion.predicted_count(c) as f64;
                if truth == 0.0 && pred == 0.0 {
                    return (c, None);
                }
                let ratio = |den: f64| if den > 0.0 { 100.0 * tp / den } else { 0.0 };
                let (precision, recall) = (ratio(pred), ratio(truth));
                let metrics = ClassMetrics {
                    precision,
                    recall,
                    f_measure: f_measure(precision, recall),
                    pixel_percent: if total > 0 { 100.0 * truth / total as f64 } else { 0.0 },
                };
                (c, Some(metrics))
            })
            .collect();
        let present: Vec<&ClassMetrics> = classes.iter().filter_map(|(_, m)| m.as_ref()).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
            }
        };
        Self {
            accuracy: if total > 0 { 100.0 * confusion.trace() as f64 / total as f64 } else { 0.0 },
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f_measure: mean(|m| m.f_measure),
            classes,
            confusion,
        }
    }

    pub fn metrics(&self, c: Category) -> Option<ClassMetrics> {
        self.classes[c.index()].1
    }

    /// Aligned plain-text table followed by the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<11}{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "F", "pixels%");
        for (c, m) in &self.classes {
            match m {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "{:<11}{:>10.2}{:>10.2}{:>10.2}{:>10.2}",
                        c.name(),
                        m.precision,
                        m.recall,
                        m.f_measure,
                        m.pixel_percent
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<11}{:>10}{:>10}{:>10}{:>10}", c.name(), "n/a", "n/a", "n/a", "n/a");
                }
            }
        }
        let _ = writeln!(
            s,
            "{:<11}{:>10.2}{:>10.2}{:>10.2}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f_measure
        );
        let _ = writeln!(s, "accuracy {:.2}%", self.accuracy);
        let _ = writeln!(s, "\nconfusion (rows truth, columns prediction)");
        let _ = write!(s, "{:<11}", "");
        for c in Category::ALL {
            let _ = write!(s, "{:>11}", c.name());
        }
        let _ = writeln!(s);
        for c in Category::ALL {
            let _ = write!(s, "{:<11}", c.name());
            for v in self.confusion.counts[c.index()] {
                let _ = write!(s, "{v:>11}");
            }
            let _ = writeln!(s);
        }
        s
    }

    /// One row per class: `class,precision,recall,f_measure,pixel_percent`.
    /// Not-applicable classes leave the numeric fields empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f_measure,pixel_percent\n");
        for (c, m) in &self.classes {
            match m {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "{},{:.4},{:.4},{:.4},{:.4}",
                        c.name(),
                        m.precision,
                        m.recall,
                        m.f_measure,
                        m.pixel_percent
                    );
                }
                None => {
                    let _ = writeln!(s, "{},,,,", c.name());
                }
            }
        }
        s
    }
}

/// Confusion counts of `pred` against `truth` over the masked pixels.
pub fn confusion(pred: &[Category], truth: &[Category], mask: Option<&[bool]>) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "prediction of {} pixels, truth of {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for i in 0..pred.len() {
        if mask.map_or(true, |m| m[i]) {
            m.add(truth[i], pred[i]);
        }
    }
    Ok(m)
}

pub fn classification_report(
    pred: &[Category],
    truth: &[Category],
    mask: Option<&[bool]>,
) -> Result<ClassificationReport> {
    let m = confusion(pred, truth, mask)?;
    if m.total() == 0 {
        return Err(Error::Shape("no pixels to evaluate".into()));
    }
    Ok(ClassificationReport::from_confusion(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Refinement errors straight from the set definitions.
    fn brute_force(s1: &[u8], s2: &[u8]) -> (f64, f64) {
        let n = s1.len();
        let region = |s: &[u8], p: usize| -> Vec<usize> { (0..n).filter(|&q| s[q] == s[p]).collect() };
        let refinement = |a: &[u8], b: &[u8], p: usize| {
            let ra = region(a, p);
            let rb = region(b, p);
            ra.iter().filter(|q| !rb.contains(q)).count() as f64 / ra.len() as f64
        };
        let (mut f, mut b, mut l) = (0.0, 0.0, 0.0);
        for p in 0..n {
            let (x, y) = (refinement(s1, s2, p), refinement(s2, s1, p));
            f += x;
            b += y;
            l += x.min(y);
        }
        (f.min(b) / n as f64, l / n as f64)
    }

    #[test]
    fn identical_segmentations_have_no_error() {
        let s = [0u8, 0, 1, 1, 2, 2];
        let c = gce_lce(&s, &s, None).unwrap();
        assert_eq!((c.gce, c.lce), (0.0, 0.0));
    }

    #[test]
    fn refinement_has_zero_gce() {
        let coarse = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let fine = [5u8, 5, 6, 6, 7, 8, 8, 9];
        let c = gce_lce(&coarse, &fine, None).unwrap();
        assert_eq!(c.gce, 0.0);
        assert_eq!(c.lce, 0.0);
    }

    #[test]
    fn matches_definition_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k1 = rng.random_range(1..6u8);
            let k2 = rng.random_range(1..6u8);
            let a: Vec<u8> = (0..36).map(|_| rng.random_range(0..k1)).collect();
            let b: Vec<u8> = (0..36).map(|_| rng.random_range(0..k2)).collect();
            let c = gce_lce(&a, &b, None).unwrap();
            let (g, l) = brute_force(&a, &b);
            assert!((c.gce - g).abs() < 1e-12 && (c.lce - l).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_restricts_evaluation() {
        let a = [0u8, 0, 1, 1];
        let b = [0u8, 1, 1, 1];
        let c = gce_lce(&a, &b, Some(&[true, false, true, true])).unwrap();
        assert_eq!(c.gce, 0.0);
        assert!(gce_lce(&a, &b[..3], None).is_err());
        assert!(gce_lce(&a, &b, Some(&[false; 4])).is_err());
    }

    #[test]
    fn f_measure_of_road_row() {
        let f = f_measure(92.37, 99.06);
        assert!((f - 95.60).abs() < 0.005, "{f}");
        assert_eq!(f_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let t = [Category::Road, Category::Sky, Category::Vehicle, Category::Road];
        let r = classification_report(&t, &t, None).unwrap();
        assert_eq!(r.accuracy, 100.0);
        for c in [Category::Road, Category::Sky, Category::Vehicle] {
            assert_eq!(r.metrics(c).unwrap().f_measure, 100.0);
        }
        assert!(r.metrics(Category::Pole).is_none());
    }

    #[test]
    fn fully_mispredicted_class_scores_zero() {
        let truth = [Category::Pole, Category::Pole, Category::Road];
        let pred = [Category::Road, Category::Road, Category::Road];
        let r = classification_report(&pred, &truth, None).unwrap();
        let pole = r.metrics(Category::Pole).unwrap();
        assert_eq!((pole.precision, pole.recall, pole.f_measure), (0.0, 0.0, 0.0));
        let road = r.metrics(Category::Road).unwrap();
        assert!((road.precision - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(road.recall, 100.0);
        assert!((pole.pixel_percent - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let truth = [Category::Road, Category::Sky];
        let pred = [Category::Road, Category::Road];
        let r = classification_report(&pred, &truth, None).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + Category::COUNT);
        assert!(csv.contains("Road,50.0000,100.0000,66.6667,50.0000"));
        assert!(csv.contains("Pole,,,,"));
        let text = r.to_text();
        assert!(text.contains("accuracy 50.00%"));
        assert!(text.contains("n/a"));
    }

    fn category() -> impl Strategy<Value = Category> {
        (0..Category::COUNT).prop_map(|i| Category::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn consistency_is_symmetric_bounded_and_relabel_invariant(
            pair in prop::collection::vec((0u8..5, 0u8..5), 1..60),
            shift in 1u8..50,
        ) {
            let (a, b): (Vec<u8>, Vec<u8>) = pair.into_iter().unzip();
            let c = gce_lce(&a, &b, None).unwrap();
            let r = gce_lce(&b, &a, None).unwrap();
            prop_assert!((c.gce - r.gce).abs() < 1e-12 && (c.lce - r.lce).abs() < 1e-12);
            prop_assert!(0.0 <= c.lce && c.lce <= c.gce + 1e-12 && c.gce <= 1.0);
            // a bijective relabeling of the first map
            let relabeled: Vec<u16> = a.iter().map(|&v| 1000 - (v as u16 * shift as u16)).collect();
            let p = gce_lce(&relabeled, &b, None).unwrap();
            prop_assert!((c.gce - p.gce).abs() < 1e-12 && (c.lce - p.lce).abs() < 1e-12);
        }

        #[test]
        fn confusion_accounts_for_every_pixel(
            pair in prop::collection::vec((category(), category()), 1..80),
        ) {
            let (pred, truth): (Vec<Category>, Vec<Category>) = pair.into_iter().unzip();
            let r = classification_report(&pred, &truth, None).unwrap();
            for c in Category::ALL {
                let expected = truth.iter().filter(|&&t| t == c).count() as u64;
                prop_assert_eq!(r.confusion.truth_count(c), expected);
            }
            prop_assert_eq!(r.accuracy, 100.0 * r.confusion.trace() as f64 / pred.len() as f64);
            for (_, m) in &r.classes {
                if let Some(m) = m {
                    for v in [m.precision, m.recall, m.f_measure] {
                        prop_assert!((0.0..=100.0).contains(&v));
                    }
                }
            }
        }
    }
}
