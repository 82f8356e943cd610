//! Group accuracy and Equalodds evaluation.
//!
//! A group is a `(target, bias value)` cell. Accuracies are reported in
//! percent. The headline average and worst group accuracies are taken over
//! joint cells (target plus every bias attribute); Equalodds is computed
//! per attribute from its marginal cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TaskSchema};
use crate::error::{Error, Result};
use crate::prob::ProbVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    predicted: Vec<usize>,
    targets: Vec<usize>,
    bias: Vec<Vec<usize>>,
}

impl PredictionSet {
    pub fn new(predicted: Vec<usize>, targets: Vec<usize>, bias: Vec<Vec<usize>>) -> Result<Self> {
        if predicted.len() != targets.len() {
            return Err(Error::shape(targets.len(), predicted.len()));
        }
        if bias.len() != targets.len() {
            return Err(Error::shape(targets.len(), bias.len()));
        }
        Ok(Self {
            predicted,
            targets,
            bias,
        })
    }

    /// Argmax predictions (ties to the lowest index) against the labels of `dataset`.
    pub fn from_probs(probs: &[ProbVector], dataset: &Dataset) -> Result<Self> {
        if probs.len() != dataset.len() {
            return Err(Error::shape(dataset.len(), probs.len()));
        }
        Self::new(
            probs.iter().map(ProbVector::argmax).collect(),
            dataset.targets(),
            dataset.examples().iter().map(|e| e.bias.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub target: usize,
    pub bias: Vec<usize>,
    pub count: usize,
    pub correct: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: TaskSchema,
    /// Joint cells in lexicographic `(target, bias...)` order.
    pub groups: Vec<GroupAccuracy>,
    pub average_group_acc: f64,
    pub worst_group_acc: f64,
    pub equalodds: BTreeMap<String, f64>,
    /// Mean of the per-attribute Equalodds values.
    pub avg_bias: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Equalodds in percent from a table of fractional accuracies `acc[y][b]`.
///
/// For two bias values this is the mean over targets of the absolute gap;
/// for more, each gap is the mean over unordered pairs of bias values.
pub fn equalodds_from_table(acc: &[Vec<f64>]) -> Result<f64> {
    let Some(card) = acc.first().map(Vec::len) else {
        return Err(Error::Evaluation("empty accuracy table".into()));
    };
    if card < 2 || acc.iter().any(|row| row.len() != card) {
        return Err(Error::Evaluation(
            "accuracy table rows need >= 2 equal-length columns".into(),
        ));
    }
    let pairs = (card * (card - 1) / 2) as f64;
    let total: f64 = acc
        .iter()
        .map(|row| {
            let mut gap = 0.0;
            for a in 0..card {
                for b in a + 1..card {
                    gap += (row[a] - row[b]).abs();
                }
            }
            gap / pairs
        })
        .sum();
    Ok(total / acc.len() as f64 * 100.0)
}

pub fn evaluate(preds: &PredictionSet, schema: &TaskSchema) -> Result<MetricsReport> {
    schema.validate()?;
    let attrs = &schema.bias_attrs;
    for (i, (&t, b)) in preds.targets.iter().zip(&preds.bias).enumerate() {
        if t >= schema.num_classes || preds.predicted[i] >= schema.num_classes {
            return Err(Error::Evaluation(format!(
                "example {i}: label outside {} classes",
                schema.num_classes
            )));
        }
        if b.len() != attrs.len() || b.iter().zip(attrs).any(|(v, a)| *v >= a.cardinality) {
            return Err(Error::Evaluation(format!(
                "example {i}: bias labels do not match schema"
            )));
        }
    }

    let mut joint: BTreeMap<(usize, Vec<usize>), (usize, usize)> = BTreeMap::new();
    for y in 0..schema.num_classes {
        for bias in joint_values(schema) {
            joint.insert((y, bias), (0, 0));
        }
    }
    let mut marginal: Vec<Vec<Vec<(usize, usize)>>> = attrs
        .iter()
        .map(|a| vec![vec![(0, 0); a.cardinality]; schema.num_classes])
        .collect();
    for ((&p, &t), b) in preds.predicted.iter().zip(&preds.targets).zip(&preds.bias) {
        let hit = usize::from(p == t);
        let cell = joint.get_mut(&(t, b.clone())).expect("all joint cells present");
        cell.0 += 1;
        cell.1 += hit;
        for (m, &v) in b.iter().enumerate() {
            marginal[m][t][v].0 += 1;
            marginal[m][t][v].1 += hit;
        }
    }

    let empty: Vec<String> = joint
        .iter()
        .filter(|(_, (n, _))| *n == 0)
        .map(|((y, b), _)| format!("(target={y}, bias={b:?})"))
        .collect();
    if !empty.is_empty() {
        return Err(Error::Evaluation(format!(
            "empty evaluation groups: {}",
            empty.join(", ")
        )));
    }

    let groups: Vec<GroupAccuracy> = joint
        .into_iter()
        .map(|((target, bias), (count, correct))| GroupAccuracy {
            target,
            bias,
            count,
            correct,
            accuracy: correct as f64 / count as f64 * 100.0,
        })
        .collect();
    let average_group_acc = groups.iter().map(|g| g.accuracy).sum::<f64>() / groups.len() as f64;
    let worst_group_acc = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);

    let mut equalodds = BTreeMap::new();
    for (attr, table) in attrs.iter().zip(&marginal) {
        let acc: Vec<Vec<f64>> = table
            .iter()
            .map(|row| row.iter().map(|&(n, c)| c as f64 / n as f64).collect())
            .collect();
        equalodds.insert(attr.name.clone(), equalodds_from_table(&acc)?);
    }
    let avg_bias = if equalodds.is_empty() {
        0.0
    } else {
        equalodds.values().sum::<f64>() / equalodds.len() as f64
    };

    Ok(MetricsReport {
        schema: schema.clone(),
        groups,
        average_group_acc,
        worst_group_acc,
        equalodds,
        avg_bias,
        metadata: BTreeMap::new(),
    })
}

fn joint_values(schema: &TaskSchema) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for attr in &schema.bias_attrs {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..attr.cardinality).map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub before: f64,
    pub after: f64,
    pub absolute: f64,
    /// `(after - before) / before`; absent when `before` is zero.
    pub relative: Option<f64>,
}

impl Delta {
    fn new(before: f64, after: f64) -> Self {
        Self {
            before,
            after,
            absolute: after - before,
            relative: (before != 0.0).then(|| (after - before) / before),
        }
    }

    /// `(before - after) / before`, the fraction of the original value removed.
    pub fn reduction(&self) -> Option<f64> {
        self.relative.map(|r| -r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub average_group_acc: Delta,
    pub worst_group_acc: Delta,
    pub equalodds: BTreeMap<String, Delta>,
    pub avg_bias: Delta,
    /// Relative reduction of `avg_bias`.
    pub bias_reduction: Option<f64>,
    /// Set when the bias got worse.
    pub regression: bool,
}

pub fn compare(before: &MetricsReport, after: &MetricsReport) -> Result<DeltaReport> {
    if before.schema != after.schema {
        return Err(Error::Evaluation("reports were computed on different schemas".into()));
    }
    let avg_bias = Delta::new(before.avg_bias, after.avg_bias);
    Ok(DeltaReport {
        average_group_acc: Delta::new(before.average_group_acc, after.average_group_acc),
        worst_group_acc: Delta::new(before.worst_group_acc, after.worst_group_acc),
        equalodds: before
            .equalodds
            .iter()
            .map(|(k, &b)| (k.clone(), Delta::new(b, after.equalodds[k])))
            .collect(),
        bias_reduction: if before.avg_bias == 0.0 && after.avg_bias == 0.0 {
            Some(0.0)
        } else {
            avg_bias.reduction()
        },
        regression: after.avg_bias > before.avg_bias,
        avg_bias,
    })
}

/// Plain-text table with one row per labelled report.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let header = ["Model", "Average ACC", "Worst ACC", "Model Bias"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.to_string(),
                format!("{:.2}", r.average_group_acc),
                format!("{:.2}", r.worst_group_acc),
                format!("{:.2}", r.avg_bias),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..4)
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: [&str; 4], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for r in &body {
        line([&r[0], &r[1], &r[2], &r[3]], &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BiasAttr;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema(k: usize, card: usize) -> TaskSchema {
        TaskSchema::new(
            k,
            vec![BiasAttr {
                name: "b".into(),
                cardinality: card,
            }],
            1,
        )
        .unwrap()
    }

    /// Ten examples per cell; `hits[y][b]` of them predicted correctly.
    fn from_hits(hits: &[Vec<usize>]) -> PredictionSet {
        let k = hits.len();
        let (mut p, mut t, mut b) = (vec![], vec![], vec![]);
        for (y, row) in hits.iter().enumerate() {
            for (v, &h) in row.iter().enumerate() {
                for i in 0..10 {
                    t.push(y);
                    b.push(vec![v]);
                    p.push(if i < h { y } else { (y + 1) % k });
                }
            }
        }
        PredictionSet::new(p, t, b).unwrap()
    }

    #[test]
    fn worked_example() {
        let preds = from_hits(&[vec![9, 7], vec![6, 8]]);
        let r = evaluate(&preds, &schema(2, 2)).unwrap();
        assert!((r.equalodds["b"] - 20.0).abs() < 1e-12);
        assert!((r.average_group_acc - 75.0).abs() < 1e-12);
        assert!((r.worst_group_acc - 60.0).abs() < 1e-12);
        assert_eq!(r.avg_bias, r.equalodds["b"]);
    }

    #[test]
    fn perfect_predictions() {
        let preds = from_hits(&[vec![10, 10], vec![10, 10], vec![10, 10]]);
        let r = evaluate(&preds, &schema(3, 2)).unwrap();
        assert_eq!(r.equalodds["b"], 0.0);
        assert_eq!((r.average_group_acc, r.worst_group_acc), (100.0, 100.0));
    }

    #[test]
    fn multi_valued_bias_uses_pair_mean() {
        // Gaps for y=0: .5, 1, .5 -> mean 2/3; y=1: all equal -> 0.
        let r = evaluate(&from_hits(&[vec![10, 5, 0], vec![4, 4, 4]]), &schema(2, 3)).unwrap();
        assert!((r.equalodds["b"] - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_named() {
        let preds = PredictionSet::new(vec![0, 1, 0], vec![0, 1, 0], vec![vec![0], vec![1], vec![1]]).unwrap();
        let err = evaluate(&preds, &schema(2, 2)).unwrap_err();
        assert!(err.to_string().contains("(target=1, bias=[0])"), "{err}");
    }

    #[test]
    fn compare_reduction_and_regression() {
        let mut before = evaluate(&from_hits(&[vec![9, 7], vec![6, 8]]), &schema(2, 2)).unwrap();
        let mut after = before.clone();
        let d = compare(&before, &after).unwrap();
        assert_eq!(d.bias_reduction, Some(0.0));
        assert_eq!(d.average_group_acc.absolute, 0.0);
        assert!(!d.regression);

        before.avg_bias = 23.26;
        after.avg_bias = 3.72;
        let d = compare(&before, &after).unwrap();
        assert!((d.bias_reduction.unwrap() - 0.840).abs() < 5e-4);

        let d = compare(&after, &before).unwrap();
        assert!(d.regression);
        assert!(d.bias_reduction.unwrap() < 0.0);

        let other = evaluate(&from_hits(&[vec![9, 7, 1], vec![6, 8, 1]]), &schema(2, 3)).unwrap();
        assert!(compare(&before, &other).is_err());
    }

    #[test]
    fn table_has_expected_columns() {
        let r = evaluate(&from_hits(&[vec![9, 7], vec![6, 8]]), &schema(2, 2)).unwrap();
        let text = render_table(&[("Vanilla", &r), ("Eraser", &r)]);
        let header = text.lines().next().unwrap();
        for col in ["Average ACC", "Worst ACC", "Model Bias"] {
            assert!(header.contains(col));
        }
        assert!(text.contains("75.00") && text.contains("60.00") && text.contains("20.00"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn random_predictor_on_balanced_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let per_cell = 2000;
        let (mut p, mut t, mut b) = (vec![], vec![], vec![]);
        for y in 0..2 {
            for v in 0..2 {
                for _ in 0..per_cell {
                    t.push(y);
                    b.push(vec![v]);
                    p.push(rng.random_range(0..2));
                }
            }
        }
        let r = evaluate(&PredictionSet::new(p, t, b).unwrap(), &schema(2, 2)).unwrap();
        let sigma = (0.25f64 / (4 * per_cell) as f64).sqrt() * 100.0;
        assert!(
            (r.average_group_acc - 50.0).abs() < 3.0 * sigma,
            "{}",
            r.average_group_acc
        );
    }

    proptest! {
        #[test]
        fn label_swap_invariance(hits in proptest::collection::vec(proptest::collection::vec(0usize..=10, 2), 2..5)) {
            let k = hits.len();
            let a = evaluate(&from_hits(&hits), &schema(k, 2)).unwrap();
            let swapped: Vec<Vec<usize>> = hits.iter().map(|r| vec![r[1], r[0]]).collect();
            let b = evaluate(&from_hits(&swapped), &schema(k, 2)).unwrap();
            prop_assert!((a.equalodds["b"] - b.equalodds["b"]).abs() < 1e-12);
            prop_assert!(a.worst_group_acc <= a.average_group_acc);
            let equal = hits.iter().all(|r| r[0] == r[1]);
            prop_assert_eq!(a.equalodds["b"] == 0.0, equal);
        }

        #[test]
        fn order_invariance(hits in proptest::collection::vec(proptest::collection::vec(0usize..=10, 2), 2..4), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let k = hits.len();
            let preds = from_hits(&hits);
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled = PredictionSet::new(
                order.iter().map(|&i| preds.predicted[i]).collect(),
                order.iter().map(|&i| preds.targets[i]).collect(),
                order.iter().map(|&i| preds.bias[i].clone()).collect(),
            ).unwrap();
            prop_assert_eq!(evaluate(&preds, &schema(k, 2)).unwrap(), evaluate(&shuffled, &schema(k, 2)).unwrap());
        }
    }
}
