//! Evaluation metrics: exact-match span micro-F1, Pearson correlation and
//! accuracy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character span `[start, end)` labelled with an entity type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

/// Spans of one document, duplicates collapsed.
pub type SpanSet = BTreeSet<Span>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MicroF1,
    Pearson,
    Accuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::Pearson => "pearson",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    Spans {
        tp: usize,
        fp: usize,
        fn_: usize,
        precision: f64,
        recall: f64,
    },
    Count {
        n: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub value: f64,
    pub support: Support,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact-match micro-F1 over documents. A predicted span is a true positive
/// iff the identical `(start, end, label)` triple is in the gold set of the
/// same document. Zero denominators yield 0.
pub fn micro_f1(pred: &[SpanSet], gold: &[SpanSet]) -> Result<MetricReport> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!(
            "{} predicted documents vs {} gold documents",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let hits = p.intersection(g).count();
        tp += hits;
        fp += p.len() - hits;
        fn_ += g.len() - hits;
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricReport {
        metric: MetricKind::MicroF1,
        value: f1,
        support: Support::Spans {
            tp,
            fp,
            fn_,
            precision,
            recall,
        },
    })
}

/// Sample Pearson correlation. Undefined (an error) when either side has
/// zero variance.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<MetricReport> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions vs {} gold scores", pred.len(), gold.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Eval("pearson needs at least two points".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Eval("pearson correlation undefined: zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(MetricReport {
        metric: MetricKind::Pearson,
        value: r,
        support: Support::Count { n: pred.len() },
    })
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<MetricReport> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!("{} predictions vs {} gold labels", pred.len(), gold.len())));
    }
    if pred.is_empty() {
        return Err(Error::Eval("accuracy over zero examples".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(MetricReport {
        metric: MetricKind::Accuracy,
        value: hits as f64 / pred.len() as f64,
        support: Support::Count { n: pred.len() },
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn set(spans: &[(usize, usize, &str)]) -> SpanSet {
        spans.iter().map(|&(s, e, l)| Span::new(s, e, l)).collect()
    }

    #[test]
    fn f1_examples() {
        let g = vec![set(&[(0, 2, "PROB"), (4, 5, "TEST")])];
        assert_eq!(micro_f1(&g, &g).unwrap().value, 1.0);

        let p = vec![set(&[(0, 2, "PROB")])];
        let r = micro_f1(&p, &g).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-15);
        match r.support {
            Support::Spans { precision, recall, .. } => {
                assert_eq!(precision, 1.0);
                assert_eq!(recall, 0.5);
            }
            _ => panic!(),
        }

        assert_eq!(micro_f1(&[SpanSet::new()], &g).unwrap().value, 0.0);
        assert_eq!(micro_f1(&[SpanSet::new()], &[SpanSet::new()]).unwrap().value, 0.0);
        assert!(matches!(micro_f1(&[], &g), Err(Error::Shape(_))));
    }

    #[test]
    fn f1_requires_type_match() {
        let g = vec![set(&[(0, 2, "PROB")])];
        let p = vec![set(&[(0, 2, "TEST")])];
        assert_eq!(micro_f1(&p, &g).unwrap().value, 0.0);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().value - 1.0).abs() < 1e-15);
        assert!((pearson(&[0.0, 5.0], &[5.0, 0.0]).unwrap().value + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Eval(_))));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap().value, 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap().value, 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap().value, 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn f1_symmetric_under_swap(
            p in prop::collection::vec(prop::collection::btree_set((0usize..4, 1usize..4, 0usize..2), 0..4), 3),
            g in prop::collection::vec(prop::collection::btree_set((0usize..4, 1usize..4, 0usize..2), 0..4), 3),
        ) {
            let to = |docs: &Vec<BTreeSet<(usize, usize, usize)>>| -> Vec<SpanSet> {
                docs.iter().map(|d| d.iter().map(|&(s, w, l)| Span::new(s, s + w, ["A", "B"][l])).collect()).collect()
            };
            let (p, g) = (to(&p), to(&g));
            let a = micro_f1(&p, &g).unwrap();
            let b = micro_f1(&g, &p).unwrap();
            prop_assert_eq!(a.value, b.value);
            if let (Support::Spans { precision: pa, recall: ra, .. }, Support::Spans { precision: pb, recall: rb, .. }) = (a.support, b.support) {
                prop_assert_eq!(pa, rb);
                prop_assert_eq!(ra, pb);
            }
        }

        #[test]
        fn pearson_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.1f64..10.0, b in -5.0f64..5.0, seed in 0u64..1000,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 * 31 + seed) % 7) as f64).collect();
            if let Ok(base) = pearson(&xs, &ys) {
                let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let r = pearson(&moved, &ys).unwrap();
                prop_assert!((r.value - base.value).abs() < 1e-12);
                let r = pearson(&xs, &ys.iter().map(|y| a * y - b).collect::<Vec<_>>()).unwrap();
                prop_assert!((r.value - base.value).abs() < 1e-12);
            }
        }
    }
}
