//! Confusion matrices, accuracy and F1.

use crate::error::{Error, Result};

/// `counts[truth][pred]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Mean F1 over classes that occur in the truth or the predictions.
    pub macro_f1: f64,
    /// Classes counted in `macro_f1`.
    pub present: Vec<bool>,
    /// Each row divided by its support; zero-support rows stay zero.
    pub row_normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![0; k * k],
        }
    }

    /// Classes named by their index.
    pub fn with_size(k: usize) -> Self {
        Self::new((0..k).map(|i| i.to_string()).collect())
    }

    pub fn from_labels(classes: Vec<String>, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::contract(format!("{} truths but {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.update(t, p)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    pub fn update(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || pred >= k {
            return Err(Error::Index(format!("label pair ({truth}, {pred}) outside {k} classes")));
        }
        self.counts[truth * k + pred] += 1;
        Ok(())
    }

    /// Elementwise sum of two matrices over the same classes.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::contract("cannot merge confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("no samples scored"));
        }
        let k = self.num_classes();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = vec![0.0; k];
        let mut recall = vec![0.0; k];
        let mut f1 = vec![0.0; k];
        let mut present = vec![false; k];
        let mut rows = vec![vec![0.0; k]; k];
        for c in 0..k {
            let tp = self.get(c, c);
            let support: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let predicted: u64 = (0..k).map(|t| self.get(t, c)).sum();
            precision[c] = ratio(tp, predicted);
            recall[c] = ratio(tp, support);
            let pr = precision[c] + recall[c];
            f1[c] = if pr == 0.0 { 0.0 } else { 2.0 * precision[c] * recall[c] / pr };
            present[c] = support > 0 || predicted > 0;
            for p in 0..k {
                rows[c][p] = ratio(self.get(c, p), support);
            }
        }
        let n_present = present.iter().filter(|&&p| p).count();
        let macro_f1 = f1.iter().zip(&present).filter(|(_, &p)| p).map(|(f, _)| f).sum::<f64>() / n_present as f64;
        Ok(Scores {
            accuracy: ratio(self.trace(), total),
            precision,
            recall,
            per_class_f1: f1,
            macro_f1,
            present,
            row_normalized: rows,
        })
    }

    /// Header of class names, one count row per truth class, then
    /// `accuracy`, `f1` and `macro_f1` footer rows.
    pub fn to_csv(&self) -> Result<String> {
        let s = self.scores()?;
        let mut out = String::from("truth");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let k = self.num_classes();
        for (t, name) in self.classes.iter().enumerate() {
            out.push_str(name);
            for p in 0..k {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out.push_str(&format!("accuracy,{}\n", s.accuracy));
        out.push_str("f1");
        for f in &s.per_class_f1 {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
        out.push_str(&format!("macro_f1,{}\n", s.macro_f1));
        Ok(out)
    }
}

pub fn cm_update(cm: &mut ConfusionMatrix, truth: usize, pred: usize) -> Result<()> {
    cm.update(truth, pred)
}

pub fn cm_scores(cm: &ConfusionMatrix) -> Result<Scores> {
    cm.scores()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn abc() -> Vec<String> {
        vec!["A".into(), "B".into(), "C".into()]
    }

    #[test]
    fn update_examples() {
        let mut cm = ConfusionMatrix::new(abc());
        cm_update(&mut cm, 0, 0).unwrap();
        assert_eq!((cm.trace(), cm.total()), (1, 1));
        cm_update(&mut cm, 1, 2).unwrap();
        assert_eq!(cm.get(1, 2), 1);
        for _ in 0..10 {
            cm.update(2, 2).unwrap();
        }
        assert_eq!(cm.total(), 12);
        assert!(matches!(cm.update(3, 0), Err(Error::Index(_))));
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_labels(abc(), &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let s = cm_scores(&cm).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.per_class_f1, vec![1.0; 3]);
        assert_eq!(s.macro_f1, 1.0);
    }

    #[test]
    fn hand_worked_two_class_case() {
        let cm = ConfusionMatrix::from_labels(abc(), &[0, 1, 1], &[0, 0, 1]).unwrap();
        let s = cm.scores().unwrap();
        assert!((s.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-12);
        // C never occurs
        assert!(!s.present[2]);
        assert!((s.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.row_normalized[2], vec![0.0; 3]);
        assert_eq!(s.row_normalized[1], vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn missed_class_counts_as_zero() {
        let cm = ConfusionMatrix::from_labels(abc(), &[0, 1, 2], &[0, 1, 1]).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.per_class_f1[2], 0.0);
        assert!(s.present[2]);
        let expect = (1.0 + 2.0 / 3.0 + 0.0) / 3.0;
        assert!((s.macro_f1 - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(ConfusionMatrix::with_size(2).scores(), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_labels(abc(), &[0, 1, 1], &[0, 0, 1]).unwrap();
        let csv = cm.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "truth,A,B,C");
        assert_eq!(lines[2], "B,1,1,0");
        assert!(lines[4].starts_with("accuracy,0.666"));
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn mean_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[0.4; 5]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    fn labels(k: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0..k, 0..k), 1..60)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(pairs in labels(4)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let s = ConfusionMatrix::from_labels(abc().into_iter().chain(["D".into()]).collect(), &t, &p).unwrap().scores().unwrap();
            prop_assert!((0.0..=1.0).contains(&s.accuracy));
            prop_assert!(s.per_class_f1.iter().all(|f| (0.0..=1.0).contains(f)));
            for (row, &present) in s.row_normalized.iter().zip(&s.present) {
                let sum: f64 = row.iter().sum();
                prop_assert!(sum.abs() < 1e-12 || (sum - 1.0).abs() < 1e-12 || !present);
            }
        }

        #[test]
        fn permuting_classes_permutes_scores(pairs in labels(3), perm in Just([2usize, 0, 1])) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = ConfusionMatrix::from_labels(abc(), &t, &p).unwrap().scores().unwrap();
            let pt: Vec<_> = t.iter().map(|&x| perm[x]).collect();
            let pp: Vec<_> = p.iter().map(|&x| perm[x]).collect();
            let b = ConfusionMatrix::from_labels(abc(), &pt, &pp).unwrap().scores().unwrap();
            for c in 0..3 {
                prop_assert!((a.per_class_f1[c] - b.per_class_f1[perm[c]]).abs() < 1e-12);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
        }

        #[test]
        fn doubling_counts_keeps_ratios(pairs in labels(3)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let cm = ConfusionMatrix::from_labels(abc(), &t, &p).unwrap();
            let mut twice = cm.clone();
            twice.merge(&cm).unwrap();
            prop_assert_eq!(twice.total(), 2 * cm.total());
            prop_assert_eq!(twice.scores().unwrap(), cm.scores().unwrap());
        }
    }
}
