//! Confusion metrics, F1 deltas, paired significance tests, prediction
//! shifts and inter-rater agreement. `Clone` is the positive class.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};
use thiserror::Error;

use crate::corpus::Label;
use crate::verdict::VerdictRecord;

/// Improvements with `p` below this are reported as significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn is_significant(p_value: f64) -> bool {
    p_value < SIGNIFICANCE_LEVEL
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {required} instances, got {got}")]
    DegenerateInput { required: usize, got: usize },
    #[error("F1 is undefined for {0}")]
    UndefinedF1(&'static str),
    #[error("pair id sets differ ({only_a} only in A, {only_b} only in B)")]
    PairIdMismatch { only_a: usize, only_b: usize },
}

/// A ratio that is `Undefined` when its denominator is zero.
///
/// Serialized as a number, or as the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Defined(f64),
    Undefined,
}

impl Ratio {
    pub fn of(num: f64, den: f64) -> Ratio {
        if den == 0.0 {
            Ratio::Undefined
        } else {
            Ratio::Defined(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Defined(v) => Some(v),
            Ratio::Undefined => None,
        }
    }

    /// Percentage with two decimals, or `undefined`.
    pub fn percent(self) -> String {
        match self {
            Ratio::Defined(v) => format!("{:.2}", v * 100.0),
            Ratio::Undefined => "undefined".into(),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Defined(v) => write!(f, "{v}"),
            Ratio::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Defined(v) => s.serialize_f64(*v),
            Ratio::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio::Defined(v)),
            Raw::Str(s) if s == "undefined" => Ok(Ratio::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"undefined\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels<I: IntoIterator<Item = (Label, Label)>>(pairs: I) -> Self {
        let mut c = ConfusionCounts::default();
        for (predicted, gold) in pairs {
            match (predicted, gold) {
                (Label::Clone, Label::Clone) => c.tp += 1,
                (Label::Clone, Label::NotClone) => c.fp += 1,
                (Label::NotClone, Label::NotClone) => c.tn += 1,
                (Label::NotClone, Label::Clone) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }

    /// Counts with `NotClone` treated as the positive class.
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    pub fn negative_predictive_value(&self) -> Ratio {
        Ratio::of(self.tn as f64, (self.tn + self.fn_) as f64)
    }
}

pub fn confusion(verdicts: &[VerdictRecord]) -> ConfusionCounts {
    ConfusionCounts::from_labels(verdicts.iter().map(|v| (v.predicted, v.gold)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: Ratio,
    pub recall: Ratio,
    pub accuracy: Ratio,
    pub f1: Ratio,
    /// Signed F1 change in percentage points against a baseline, if compared.
    pub delta_f1_points: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> MetricSet {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let precision = Ratio::of(tp, tp + fp);
    let recall = Ratio::of(tp, tp + fn_);
    let accuracy = Ratio::of(tp + tn, tp + tn + fp + fn_);
    let f1 = match (precision, recall) {
        (Ratio::Defined(p), Ratio::Defined(r)) => Ratio::of(2.0 * p * r, p + r),
        _ => Ratio::Undefined,
    };
    MetricSet {
        precision,
        recall,
        accuracy,
        f1,
        delta_f1_points: None,
        p_value: None,
    }
}

/// F1 from precision and recall given as fractions.
pub fn f1_from(precision: f64, recall: f64) -> Ratio {
    Ratio::of(2.0 * precision * recall, precision + recall)
}

/// `(run.f1 - baseline.f1)` in percentage points.
pub fn delta_f1(run: &MetricSet, baseline: &MetricSet) -> Result<f64, StatsError> {
    let r = run.f1.value().ok_or(StatsError::UndefinedF1("run"))?;
    let b = baseline.f1.value().ok_or(StatsError::UndefinedF1("baseline"))?;
    Ok((r - b) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceTest {
    /// Two-sided paired Student t-test over per-instance correctness.
    #[default]
    PairedT,
    /// Two-sided exact McNemar test on the discordant pairs.
    McnemarExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub test: SignificanceTest,
    pub n: usize,
    pub statistic: f64,
    pub df: Option<u64>,
    pub p_value: f64,
}

fn check_paired(a: &[bool], b: &[bool]) -> Result<(), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(StatsError::DegenerateInput { required: 2, got: a.len() });
    }
    Ok(())
}

/// Paired t-test on `d_i = b_i - a_i` where each entry is 1 when the instance
/// was classified correctly.
pub fn paired_t_test(correct_a: &[bool], correct_b: &[bool]) -> Result<PairedTestResult, StatsError> {
    check_paired(correct_a, correct_b)?;
    let n = correct_a.len();
    let d: Vec<f64> = correct_a
        .iter()
        .zip(correct_b)
        .map(|(&a, &b)| f64::from(u8::from(b)) - f64::from(u8::from(a)))
        .collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = (n - 1) as u64;
    let (statistic, p_value) = if d.iter().all(|&x| x == 0.0) {
        (0.0, 1.0)
    } else if var == 0.0 {
        (mean.signum() * f64::INFINITY, 0.0)
    } else {
        let t = mean / (var.sqrt() / nf.sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(PairedTestResult {
        test: SignificanceTest::PairedT,
        n,
        statistic,
        df: Some(df),
        p_value,
    })
}

/// Exact McNemar: two-sided binomial test of the discordant counts at 1/2.
pub fn mcnemar_exact(correct_a: &[bool], correct_b: &[bool]) -> Result<PairedTestResult, StatsError> {
    check_paired(correct_a, correct_b)?;
    let shifts = shift_from_correctness(correct_a, correct_b);
    let discordant = shifts.wrong_to_right + shifts.right_to_wrong;
    let smaller = shifts.wrong_to_right.min(shifts.right_to_wrong);
    let p_value = if discordant == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, discordant).expect("valid binomial");
        (2.0 * dist.cdf(smaller)).min(1.0)
    };
    Ok(PairedTestResult {
        test: SignificanceTest::McnemarExact,
        n: correct_a.len(),
        statistic: smaller as f64,
        df: None,
        p_value,
    })
}

pub fn paired_significance(
    correct_a: &[bool],
    correct_b: &[bool],
    test: SignificanceTest,
) -> Result<PairedTestResult, StatsError> {
    match test {
        SignificanceTest::PairedT => paired_t_test(correct_a, correct_b),
        SignificanceTest::McnemarExact => mcnemar_exact(correct_a, correct_b),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftCounts {
    pub wrong_to_right: u64,
    pub right_to_wrong: u64,
}

pub fn shift_from_correctness(correct_a: &[bool], correct_b: &[bool]) -> ShiftCounts {
    let mut s = ShiftCounts::default();
    for (&a, &b) in correct_a.iter().zip(correct_b) {
        match (a, b) {
            (false, true) => s.wrong_to_right += 1,
            (true, false) => s.right_to_wrong += 1,
            _ => {}
        }
    }
    s
}

/// Per-instance correctness of both runs on the pair ids they share,
/// ordered by pair id.
pub fn aligned_correctness(a: &[VerdictRecord], b: &[VerdictRecord]) -> (Vec<String>, Vec<bool>, Vec<bool>) {
    let b_by_id: HashMap<&str, &VerdictRecord> = b.iter().map(|v| (v.pair_id.as_str(), v)).collect();
    let mut rows: Vec<(&str, bool, bool)> = a
        .iter()
        .filter_map(|va| b_by_id.get(va.pair_id.as_str()).map(|vb| (va.pair_id.as_str(), va.is_correct(), vb.is_correct())))
        .collect();
    rows.sort_by(|x, y| x.0.cmp(y.0));
    let ids = rows.iter().map(|r| r.0.to_string()).collect();
    let ca = rows.iter().map(|r| r.1).collect();
    let cb = rows.iter().map(|r| r.2).collect();
    (ids, ca, cb)
}

/// Transitions between correct and incorrect verdicts from run A to run B.
pub fn prediction_shift(a: &[VerdictRecord], b: &[VerdictRecord]) -> Result<ShiftCounts, StatsError> {
    let ids_a: HashSet<&str> = a.iter().map(|v| v.pair_id.as_str()).collect();
    let ids_b: HashSet<&str> = b.iter().map(|v| v.pair_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(StatsError::PairIdMismatch {
            only_a: ids_a.difference(&ids_b).count(),
            only_b: ids_b.difference(&ids_a).count(),
        });
    }
    let (_, ca, cb) = aligned_correctness(a, b);
    Ok(shift_from_correctness(&ca, &cb))
}

/// Cohen's kappa with marginal-product chance agreement.
pub fn cohen_kappa<T: Eq + Hash>(ann_a: &[T], ann_b: &[T]) -> Result<Ratio, StatsError> {
    if ann_a.len() != ann_b.len() {
        return Err(StatsError::LengthMismatch { left: ann_a.len(), right: ann_b.len() });
    }
    if ann_a.is_empty() {
        return Err(StatsError::DegenerateInput { required: 1, got: 0 });
    }
    let n = ann_a.len() as f64;
    let observed = ann_a.iter().zip(ann_b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marg_a: HashMap<&T, f64> = HashMap::new();
    let mut marg_b: HashMap<&T, f64> = HashMap::new();
    for (x, y) in ann_a.iter().zip(ann_b) {
        *marg_a.entry(x).or_default() += 1.0;
        *marg_b.entry(y).or_default() += 1.0;
    }
    let expected: f64 = marg_a
        .iter()
        .map(|(label, ca)| ca * marg_b.get(label).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (n * n);
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(Ratio::Undefined);
    }
    Ok(Ratio::Defined((observed - expected) / (1.0 - expected)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use Label::{Clone as C, NotClone as N};

    fn rec(id: usize, predicted: Label, gold: Label) -> VerdictRecord {
        VerdictRecord {
            pair_id: format!("p{id}"),
            predicted,
            gold,
            confidence: None,
            raw_response: predicted.answer().into(),
            rationale: None,
        }
    }

    fn recs(preds: &[Label], golds: &[Label]) -> Vec<VerdictRecord> {
        preds.iter().zip(golds).enumerate().map(|(i, (&p, &g))| rec(i, p, g)).collect()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&recs(&[C, C, N, N], &[C, N, N, C]));
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let c = confusion(&recs(&[C; 10], &[C; 10]));
        assert_eq!(c, ConfusionCounts { tp: 10, ..Default::default() });
        assert_eq!(confusion(&[]), ConfusionCounts::default());
    }

    #[test]
    fn metric_example() {
        let m = metrics(&ConfusionCounts { tp: 50, fp: 10, tn: 35, fn_: 5 });
        assert_abs_diff_eq!(m.precision.value().unwrap(), 50.0 / 60.0, epsilon = 1e-15);
        assert_eq!(format!("{:.4}", m.precision.value().unwrap()), "0.8333");
        assert_eq!(format!("{:.4}", m.recall.value().unwrap()), "0.9091");
        assert_eq!(format!("{:.4}", m.accuracy.value().unwrap()), "0.8500");
        assert_eq!(format!("{:.4}", m.f1.value().unwrap()), "0.8696");
    }

    #[test]
    fn perfect_classifier() {
        let m = metrics(&ConfusionCounts { tp: 7, fp: 0, tn: 3, fn_: 0 });
        for r in [m.precision, m.recall, m.accuracy, m.f1] {
            assert_eq!(r, Ratio::Defined(1.0));
        }
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let m = metrics(&ConfusionCounts::default());
        assert_eq!(m.precision, Ratio::Undefined);
        assert_eq!(m.accuracy, Ratio::Undefined);
        assert_eq!(m.f1, Ratio::Undefined);
        let m = metrics(&ConfusionCounts { tp: 0, fp: 3, tn: 2, fn_: 4 });
        assert_eq!(m.precision, Ratio::Defined(0.0));
        assert_eq!(m.f1, Ratio::Undefined);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"f1\":\"undefined\""));
        let back: MetricSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f1_from_rounded_table_values() {
        let f1 = f1_from(0.9820, 0.8201).value().unwrap() * 100.0;
        assert_eq!(format!("{f1:.2}"), "89.38");
        assert!((f1 - 89.30).abs() <= 0.15);
    }

    #[test]
    fn delta_examples() {
        let with = |f1: f64| MetricSet { f1: Ratio::Defined(f1), ..metrics(&ConfusionCounts::default()) };
        assert_eq!(format!("{:+.2}", delta_f1(&with(0.9361), &with(0.8930)).unwrap()), "+4.31");
        assert_eq!(delta_f1(&with(0.5), &with(0.5)).unwrap(), 0.0);
        assert_eq!(format!("{:+.2}", delta_f1(&with(0.9431), &with(0.8454)).unwrap()), "+9.77");
        let undefined = metrics(&ConfusionCounts::default());
        assert_eq!(delta_f1(&undefined, &with(0.5)), Err(StatsError::UndefinedF1("run")));
    }

    #[test]
    fn t_test_identical_vectors() {
        let a = [true, false, true, true];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn t_test_two_improvements_in_ten() {
        let a = [false; 10];
        let mut b = [false; 10];
        b[0] = true;
        b[1] = true;
        let r = paired_t_test(&a, &b).unwrap();
        assert_abs_diff_eq!(r.statistic, 1.5, epsilon = 1e-12);
        assert_eq!(r.df, Some(9));
        // scipy.stats.ttest_rel
        assert_abs_diff_eq!(r.p_value, 0.16785065605707492, epsilon = 1e-9);
        assert!(!is_significant(r.p_value));
    }

    #[test]
    fn t_test_constant_nonzero_difference() {
        let r = paired_t_test(&[false, false, false], &[true, true, true]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.statistic.is_infinite() && r.statistic > 0.0);
    }

    #[test]
    fn t_test_input_errors() {
        assert_eq!(
            paired_t_test(&[true], &[true, false]).unwrap_err(),
            StatsError::LengthMismatch { left: 1, right: 2 }
        );
        assert_eq!(
            paired_t_test(&[true], &[false]).unwrap_err(),
            StatsError::DegenerateInput { required: 2, got: 1 }
        );
    }

    #[test]
    fn mcnemar_small_case() {
        // 3 wrong->right, 7 unchanged: p = 2 * 0.5^3 = 0.25
        let a = [false, false, false, true, true, true, true, true, true, true];
        let b = [true; 10];
        let r = mcnemar_exact(&a, &b).unwrap();
        assert_abs_diff_eq!(r.p_value, 0.25, epsilon = 1e-12);
        // 3 vs 7 discordant: scipy.stats.binomtest(3, 10).pvalue
        let a: Vec<bool> = (0..10).map(|i| i >= 3).collect();
        let b: Vec<bool> = (0..10).map(|i| i < 3).collect();
        assert_abs_diff_eq!(mcnemar_exact(&a, &b).unwrap().p_value, 0.34375, epsilon = 1e-12);
        assert_eq!(mcnemar_exact(&a, &a).unwrap().p_value, 1.0);
    }

    #[test]
    fn shift_examples() {
        let wrong = recs(&[N; 5], &[C; 5]);
        let right = recs(&[C; 5], &[C; 5]);
        assert_eq!(
            prediction_shift(&wrong, &right).unwrap(),
            ShiftCounts { wrong_to_right: 5, right_to_wrong: 0 }
        );
        assert_eq!(prediction_shift(&right, &right).unwrap(), ShiftCounts::default());
        let short = recs(&[C; 4], &[C; 4]);
        assert!(matches!(prediction_shift(&short, &right), Err(StatsError::PairIdMismatch { only_a: 0, only_b: 1 })));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[1, 0, 1, 2], &[1, 0, 1, 2]).unwrap(), Ratio::Defined(1.0));
        assert_eq!(cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap(), Ratio::Defined(0.0));
        assert_eq!(cohen_kappa(&["x"; 4], &["x"; 4]).unwrap(), Ratio::Undefined);
        assert!(cohen_kappa(&[1, 0], &[1]).is_err());
        let k = cohen_kappa(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap().value().unwrap();
        assert!(k <= 0.0);
    }

    /// Recomputes every metric from the raw label lists without going
    /// through `ConfusionCounts`.
    fn brute_force(preds: &[Label], golds: &[Label]) -> [Option<f64>; 4] {
        let n = preds.len();
        let idx: Vec<usize> = (0..n).collect();
        let predicted_pos = idx.iter().filter(|&&i| preds[i] == C).count();
        let actual_pos = idx.iter().filter(|&&i| golds[i] == C).count();
        let hits = idx.iter().filter(|&&i| preds[i] == C && golds[i] == C).count();
        let agree = idx.iter().filter(|&&i| preds[i] == golds[i]).count();
        let div = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let p = div(hits, predicted_pos);
        let r = div(hits, actual_pos);
        let f1 = match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        [p, r, div(agree, n), f1]
    }

    fn label() -> impl Strategy<Value = Label> {
        prop_oneof![Just(C), Just(N)]
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(rows in prop::collection::vec((label(), label()), 0..=12)) {
            let (preds, golds): (Vec<_>, Vec<_>) = rows.iter().copied().unzip();
            let m = metrics(&confusion(&recs(&preds, &golds)));
            let expected = brute_force(&preds, &golds);
            for (got, want) in [m.precision, m.recall, m.accuracy, m.f1].iter().zip(expected) {
                match (got.value(), want) {
                    (Some(g), Some(w)) => prop_assert!((g - w).abs() <= 1e-12),
                    (None, None) => {}
                    other => prop_assert!(false, "mismatch {:?}", other),
                }
            }
        }

        #[test]
        fn f1_between_precision_and_recall(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let m = metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            if let (Some(p), Some(r), Some(f)) = (m.precision.value(), m.recall.value(), m.f1.value()) {
                prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            }
        }

        #[test]
        fn class_swap(rows in prop::collection::vec((label(), label()), 0..=12)) {
            let c = ConfusionCounts::from_labels(rows.iter().copied());
            let flip = |l: Label| if l == C { N } else { C };
            let swapped = ConfusionCounts::from_labels(rows.iter().map(|&(p, g)| (flip(p), flip(g))));
            prop_assert_eq!(swapped, c.swapped());
            prop_assert_eq!(metrics(&swapped).accuracy, metrics(&c).accuracy);
            prop_assert_eq!(metrics(&swapped).precision, c.negative_predictive_value());
        }

        #[test]
        fn t_test_sign_symmetry(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..40)) {
            let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let ab = paired_t_test(&a, &b).unwrap();
            let ba = paired_t_test(&b, &a).unwrap();
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            if ab.statistic.is_finite() {
                prop_assert!((ab.statistic + ba.statistic).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }
}
